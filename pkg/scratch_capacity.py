import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.styletext import AttributeCodebook

t0 = time.time()
dcfg = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
dataset = sg.generate_dataset(dcfg)
for dec, extra in (((32, 24, 16), (1, 1, 5)), ((48, 32, 16), (1, 1, 6))):
    mcfg = M.ModelConfig(dec_channels=dec, enc_extra_convs=extra)
    m = M.SegModel.initialize(mcfg, seed=0)
    budget = m.parameter_budget()
    print(f"dec={dec} ratio={budget['trainable_ratio']:.4f} trainable={budget['trainable']}", flush=True)
    pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
    encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
    print(f"pretrain {time.time()-t0:.0f}s mse {plog['heldout_mse_before']:.4f}->{plog['heldout_mse_after']:.4f}", flush=True)
    codebook = AttributeCodebook.create(1)
    tcfg = TR.TrainConfig(method="erm_lambda0", lr=3e-3, epochs=25, batch_size=16, seed=3)
    snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
    ep = [r["val_dice"] for r in runlog if r["type"] == "epoch"]
    print(f"dec={dec}: traj {[f'{v:.3f}' for v in ep[::3]]} best={max(ep):.3f} wall={timing['wall_seconds']:.0f}s", flush=True)
