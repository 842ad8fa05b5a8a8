"""Disentangle the fit bottleneck: content geometry, pretraining quality,
or the frozen-encoder architecture itself (unfrozen ceiling)."""
import sys
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import tensor as T
from causalseg import trainer as TR
from causalseg.losses import seg_loss
from causalseg.optim import Adam
from causalseg.styletext import AttributeCodebook

t0 = time.time()
dcfg = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
dataset = sg.generate_dataset(dcfg)
mcfg = M.ModelConfig()
codebook = AttributeCodebook.create(1)
print(f"geometry blob_radius={dcfg.blob_radius} wobble={dcfg.blob_wobble}", flush=True)

mode = sys.argv[1]

if mode == "unfrozen":
    # ceiling probe: encoder trains jointly with the heads
    model = M.SegModel.initialize(mcfg, seed=3)
    M.set_requires_grad(model.encoder, True)
    params = (M.param_list(model.encoder) + M.param_list(model.adapter)
              + M.param_list(model.decoder))
    opt = Adam(params, lr=3e-3)
    fit = dataset.train[:540]
    val = dataset.train[540:]
    val_imgs = np.stack([s.image for s in val])[:, None]
    val_masks = np.stack([s.mask for s in val])
    rng = np.random.default_rng(0)
    for epoch in range(20):
        order = rng.permutation(len(fit))
        for i in range(0, len(fit) - 15, 16):
            batch = [fit[j] for j in order[i:i+16]]
            x = T.Tensor(np.stack([s.image for s in batch])[:, None])
            masks = np.stack([s.mask for s in batch])
            opt.zero_grad()
            with T.Tape():
                raw = M.encoder_forward(model.encoder, mcfg, x)
                f = M.adapter_forward(model.adapter, raw)
                logits = M.decoder_forward(model.decoder, mcfg, f)
                loss, _ = seg_loss(logits, masks)
                T.backward(loss)
            opt.step()
        raw = M.encoder_forward(model.encoder, mcfg, T.Tensor(val_imgs))
        f = M.adapter_forward(model.adapter, raw)
        pred = np.argmax(M.decoder_forward(model.decoder, mcfg, f).data, axis=1)
        d = TR.foreground_dice(pred, val_masks, 4)
        print(f"unfrozen epoch {epoch} val_dice {d:.3f} ({time.time()-t0:.0f}s)", flush=True)
else:
    pool_n, pre_epochs = (600, 10) if mode == "goodpre" else (320, 4)
    pool = sg.make_pretrain_pool(dcfg, pool_n, seed=1)
    encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=pre_epochs, seed=1)
    print(f"pretrain pool={pool_n} epochs={pre_epochs} "
          f"mse {plog['heldout_mse_before']:.4f}->{plog['heldout_mse_after']:.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tcfg = TR.TrainConfig(method="erm_lambda0", lr=3e-3, epochs=20, batch_size=16, seed=3)
    snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
    ep = [r["val_dice"] for r in runlog if r["type"] == "epoch"]
    print(f"{mode}: traj {[f'{v:.3f}' for v in ep[::2]]} best={max(ep):.3f} "
          f"wall={timing['wall_seconds']:.0f}s", flush=True)
