import numpy as np
from deinforeg.tensor import RngState, column_mean_std, row_l2_normalize
from deinforeg import data as dat, network as nw
from deinforeg.losses import LossConfig
from scripts_tune_a import train_once

ds = dat.standardize(dat.gen_spirals(3, 400, 0.1, RngState(7, 'dataset')))
seeds = [0, 1, 2, 3, 4]

print('=== C) collapse: min column std of normalized final embeddings ===', flush=True)
for emb in (4, 8):
    for gamma in (1.0, 0.0):
        stds = []
        for s in seeds:
            net, _, fin = train_once(ds, 'deinforeg', s, emb=emb, gamma=gamma)
            e = nw.module_embeddings(net, ds.split_features('train'))
            _, st = column_mean_std(row_l2_normalize(e, 1e-8))
            stds.append(float(st.a.min()))
        print(f'emb={emb} gamma={gamma}: min_std mean={np.mean(stds):.3f} each={np.round(stds,3)}',
              flush=True)

print('=== E) ablation (final acc, 5-seed mean) ===', flush=True)
SUBSETS = [('V', (1, 0, 0)), ('I', (0, 1, 0)), ('C', (0, 0, 1)),
           ('V+I', (1, 1, 0)), ('V+C', (1, 0, 1)), ('I+C', (0, 1, 1)),
           ('V+I+C', (1, 1, 1))]
for name, t in SUBSETS:
    terms = tuple(bool(v) for v in t)
    finals = [train_once(ds, 'deinforeg', s, terms=terms)[2] for s in seeds]
    print(f'{name}: mean_final={np.mean(finals):.4f} each={np.round(finals,3)}', flush=True)
