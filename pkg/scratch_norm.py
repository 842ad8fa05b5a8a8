"""Does freeze-time feature standardization unlock the fit? Try lr grid."""
import sys
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.styletext import AttributeCodebook

lr = float(sys.argv[1])
base = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
clean_source = sg.DomainSpec(name="ct_mild", contrast=(1.0, 1.0))
dcfg = sg.DatasetConfig(**{**base.__dict__, "source_domains": (clean_source,)})
dataset = sg.generate_dataset(dcfg)
mcfg = M.ModelConfig()
t0 = time.time()
pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
codebook = AttributeCodebook.create(1)
tcfg = TR.TrainConfig(method="erm_lambda0", lr=lr, epochs=16, batch_size=16, seed=3)
snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
ep = [r["val_dice"] for r in runlog if r["type"] == "epoch"]
print(f"lr={lr} normed: traj {[f'{v:.3f}' for v in ep[::2]]} best={max(ep):.3f} "
      f"wall={timing['wall_seconds']:.0f}s total={time.time()-t0:.0f}s", flush=True)
