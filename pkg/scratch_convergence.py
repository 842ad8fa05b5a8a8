"""How many epochs / what lr until the model actually fits the source data?"""
import sys
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.styletext import AttributeCodebook

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 1e-3
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 40

t0 = time.time()
dcfg = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
mcfg = M.ModelConfig()
dataset = sg.generate_dataset(dcfg)
pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
print(f"pretrain {time.time()-t0:.0f}s mse {plog['heldout_mse_before']:.4f}->{plog['heldout_mse_after']:.4f}", flush=True)

codebook = AttributeCodebook.create(1)
tcfg = TR.TrainConfig(method="erm_lambda0", lr=lr, epochs=epochs, batch_size=16, seed=3)
snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
for r in runlog:
    if r["type"] == "epoch":
        print(f"epoch {r['epoch']:3d} val_dice {r['val_dice']:.3f}", flush=True)
steps = [r for r in runlog if r["type"] == "step"]
print(f"lr={lr} first l_seg {steps[0]['l_seg']:.3f} last {steps[-1]['l_seg']:.3f} wall {timing['wall_seconds']:.0f}s", flush=True)
