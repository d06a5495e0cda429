import numpy as np
from deinforeg.tensor import RngState
from deinforeg import data as dat, network as nw
from deinforeg.losses import LossConfig
from scripts_tune_a import train_once

seeds = [0, 1, 2, 3, 4]

print('=== D) depth: accuracy and gradient profile ===', flush=True)
ds = dat.standardize(dat.gen_spirals(3, 300, 0.1, RngState(7, 'dataset')))


def profile_run(mode, seed, L, epochs=40, width=12, emb=6, lr=0.2, bs=32):
    loss = LossConfig()
    spec = nw.uniform_spec(L, 2, 3, width=width, activation='tanh', projector='mlp',
                           projector_hidden=width, embedding_dim=emb, loss=loss, mode=mode)
    rng = RngState(seed)
    net = nw.build(spec, rng.derive('init'))
    net.configure_optimizers(lr, 0.9)
    grad_sums = np.zeros(L)
    n_steps = 0
    for epoch in range(1, epochs + 1):
        erng = rng.derive('shuffle', epoch)
        for x, y in dat.batches(ds, 'train', bs, True, erng):
            if mode == 'deinforeg':
                rep = nw.train_step_deinforeg(net, x, y)
            else:
                rep = nw.train_step_bp(net, x, y)
            grad_sums += rep.encoder_grad_magnitude
            n_steps += 1
    acc = nw.accuracy(net, ds.split_features('test'), ds.split_labels('test'))
    return acc, grad_sums / n_steps


for mode in ('bp', 'deinforeg'):
    for L in (4, 8, 12):
        accs, firsts, lasts = [], [], []
        for s in seeds:
            acc, prof = profile_run(mode, s, L)
            accs.append(acc)
            firsts.append(prof[0])
            lasts.append(prof[-1])
        print(f'{mode} L={L}: acc={np.mean(accs):.4f} each={np.round(accs,3)} '
              f'grad_first={np.mean(firsts):.3e} grad_last={np.mean(lasts):.3e} '
              f'first/last={np.mean(firsts)/np.mean(lasts):.4f}', flush=True)
