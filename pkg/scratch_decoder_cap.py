"""Pure decoder-family cap: train the decoder on PERFECT coarse features
(8x8 soft class-occupancy of the true mask). If dice tops out well below
0.9, the NN-up + single-conv stage family is the limiting factor."""
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import tensor as T
from causalseg.losses import seg_loss
from causalseg.optim import Adam
from causalseg.trainer import foreground_dice

base = sg.default_benchmark_config(master_seed=2024, samples_per_domain=400,
                                   test_samples_per_domain=60)
dcfg = base
dataset = sg.generate_dataset(dcfg)
mcfg = M.ModelConfig()

def coarse_features(mask):
    # 8x8 soft occupancy per class, tiled to 64 channels
    onehot = np.stack([(mask == c).astype(np.float64) for c in range(4)])
    pooled = onehot.reshape(4, 8, 8, 8, 8).mean(axis=(2, 4))  # [4,8,8]
    reps = 64 // 4
    return np.tile(pooled, (reps, 1, 1))  # [64,8,8]

feats = np.stack([coarse_features(s.mask) for s in dataset.train])
masks = np.stack([s.mask for s in dataset.train])
vfeats = np.stack([coarse_features(s.mask) for s in dataset.id_test])
vmasks = np.stack([s.mask for s in dataset.id_test])

dec = M.init_decoder(mcfg, 0)
opt = Adam(M.param_list(dec), lr=3e-3)
rng = np.random.default_rng(0)
t0 = time.time()
for epoch in range(14):
    idx = rng.permutation(len(feats))
    for i in range(0, len(feats) - 15, 16):
        b = idx[i:i + 16]
        opt.zero_grad()
        with T.Tape():
            logits = M.decoder_forward(dec, mcfg, T.Tensor(feats[b]))
            loss, _ = seg_loss(logits, masks[b])
            T.backward(loss)
        opt.step()
    pred = np.argmax(M.decoder_forward(dec, mcfg, T.Tensor(vfeats)).data, axis=1)
    d = foreground_dice(pred, vmasks, 4)
    print(f"epoch {epoch} oracle-feature val dice {d:.3f} ({time.time()-t0:.0f}s)", flush=True)
