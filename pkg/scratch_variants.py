"""Ceiling probes: easier content geometry x decoder kernel size."""
import sys
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.styletext import AttributeCodebook

variant = sys.argv[1]

base = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
clean_source = sg.DomainSpec(name="ct_mild", contrast=(1.0, 1.0))
over = {"source_domains": (clean_source,)}
if "easy" in variant:
    over.update(blob_radius=(0.17, 0.30), blob_wobble=(0.12, 0.06),
                min_class_pixels=150)
dcfg = sg.DatasetConfig(**{**base.__dict__, **over})
dataset = sg.generate_dataset(dcfg)

mkw = {}
if "k5" in variant:
    mkw = dict(dec_kernel=5, dec_channels=(20, 10, 8), enc_extra_convs=(1, 1, 7))
mcfg = M.ModelConfig(**mkw)
print(f"{variant}: ratio={M.SegModel.initialize(mcfg, 0).parameter_budget()['trainable_ratio']:.4f}", flush=True)

t0 = time.time()
pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
print(f"pretrain mse {plog['heldout_mse_after']:.4f} ({time.time()-t0:.0f}s)", flush=True)
codebook = AttributeCodebook.create(1)
tcfg = TR.TrainConfig(method="erm_lambda0", lr=3e-3, epochs=16, batch_size=16, seed=3)
snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
ep = [r["val_dice"] for r in runlog if r["type"] == "epoch"]
print(f"{variant}: traj {[f'{v:.3f}' for v in ep[::2]]} best={max(ep):.3f} wall={timing['wall_seconds']:.0f}s", flush=True)
