import numpy as np
from deinforeg.tensor import RngState
from deinforeg import data as dat, network as nw
from deinforeg.losses import LossConfig


def train_once(ds, mode, seed, alpha=1e-3, epochs=60, lr=0.2, bs=32, width=16,
               emb=8, L=4, gamma=1.0, terms=(True, True, True), proj='mlp'):
    loss = LossConfig(alpha=alpha, gamma=gamma)
    spec = nw.uniform_spec(L, 2, 3, width=width, activation='tanh', projector=proj,
                           projector_hidden=width, embedding_dim=emb, loss=loss, mode=mode)
    rng = RngState(seed)
    net = nw.build(spec, rng.derive('init'))
    net.configure_optimizers(lr, 0.9)
    best = 0.0
    for epoch in range(1, epochs + 1):
        erng = rng.derive('shuffle', epoch)
        for x, y in dat.batches(ds, 'train', bs, True, erng):
            if mode == 'deinforeg':
                nw.train_step_deinforeg(net, x, y, terms)
            else:
                nw.train_step_bp(net, x, y)
        te = nw.accuracy(net, ds.split_features('test'), ds.split_labels('test'))
        best = max(best, te)
    final = nw.accuracy(net, ds.split_features('test'), ds.split_labels('test'))
    return net, best, final


def spiral_ds(noise, per_arm=400):
    return dat.standardize(dat.gen_spirals(3, per_arm, noise, RngState(7, 'dataset')))


if __name__ == '__main__':
    seeds = [0, 1, 2]
    for noise in (0.2, 0.3):
        ds = spiral_ds(noise)
        print(f'=== alpha sweep at spiral noise {noise} (best acc, 3-seed) ===', flush=True)
        for alpha in (1e0, 1e-1, 1e-2, 1e-3, 1e-5):
            bests = [train_once(ds, 'deinforeg', s, alpha=alpha)[1] for s in seeds]
            print(f'alpha={alpha:g}: mean_best={np.mean(bests):.4f} each={np.round(bests,3)}',
                  flush=True)
        bp = [train_once(ds, 'bp', s)[2] for s in seeds]
        print(f'bp baseline: mean_final={np.mean(bp):.4f}', flush=True)
