"""Visual + numeric diagnosis of what the plateaued model gets wrong."""
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.metrics import dice_score
from causalseg.styletext import AttributeCodebook

base = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
clean_source = sg.DomainSpec(name="ct_mild", contrast=(1.0, 1.0))
dcfg = sg.DatasetConfig(**{**base.__dict__, "source_domains": (clean_source,)})
dataset = sg.generate_dataset(dcfg)
mcfg = M.ModelConfig()
pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
encoder, _ = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
codebook = AttributeCodebook.create(1)
tcfg = TR.TrainConfig(method="erm_lambda0", lr=3e-3, epochs=14, batch_size=16, seed=3)
snap, runlog, _ = TR.train(tcfg, dataset, encoder, mcfg, codebook)
model = snap.model

glyphs = ".123"
for si in (0, 1):
    s = dataset.id_test[si]
    pred = TR.predict_masks(model, s.image[None])[0]
    print(f"--- sample {si}")
    for c in range(1, 4):
        d = dice_score(pred, s.mask, c)
        gt_n, pr_n = int((s.mask == c).sum()), int((pred == c).sum())
        # centroid shift
        if gt_n and pr_n:
            gy, gx = np.argwhere(s.mask == c).mean(axis=0)
            py, px = np.argwhere(pred == c).mean(axis=0)
            shift = f"dy={py-gy:+.1f} dx={px-gx:+.1f}"
        else:
            shift = "missing"
        print(f"  class {c}: dice={d:.3f} gt_px={gt_n} pred_px={pr_n} {shift}")
    for r in range(0, 64, 2):
        row_gt = "".join(glyphs[v] for v in s.mask[r, ::2])
        row_pr = "".join(glyphs[v] for v in pred[r, ::2])
        print(f"  {row_gt}   {row_pr}")
