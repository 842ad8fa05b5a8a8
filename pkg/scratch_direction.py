"""Throwaway directional probe: does LAD beat ERM on OOD Dice at 1/4 scale?"""
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.metrics import domain_probe
from causalseg.styletext import AttributeCodebook
from causalseg.trainer import foreground_dice, pooled_adapter_features, predict_masks

t0 = time.time()
dcfg = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
mcfg = M.ModelConfig()
dataset = sg.generate_dataset(dcfg)
print(f"dataset ready {time.time()-t0:.1f}s", flush=True)

pool = sg.make_pretrain_pool(dcfg, 320, seed=1)
encoder, plog = M.pretrain_encoder(pool, mcfg, epochs=4, seed=1)
print(f"pretrain done {time.time()-t0:.1f}s mse {plog['heldout_mse_before']:.4f}->{plog['heldout_mse_after']:.4f}", flush=True)

codebook = AttributeCodebook.create(1)

def evaluate(snap, name):
    model = snap.model
    rows = {}
    id_imgs = np.stack([s.image for s in dataset.id_test])
    id_masks = np.stack([s.mask for s in dataset.id_test])
    rows["id"] = foreground_dice(predict_masks(model, id_imgs), id_masks, 4)
    feats, labels = [], []
    feats.append(pooled_adapter_features(model, id_imgs)); labels += [0]*len(id_imgs)
    for di, (dom, samples) in enumerate(sorted(dataset.ood_tests.items())):
        imgs = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        rows[dom] = foreground_dice(predict_masks(model, imgs), masks, 4)
        feats.append(pooled_adapter_features(model, imgs)); labels += [di+1]*len(imgs)
    rows["avg_ood"] = np.mean([rows[d] for d in dataset.ood_tests])
    rows["probe"] = domain_probe(np.concatenate(feats), np.array(labels), split_seed=0)
    print(f"{name}: " + " ".join(f"{k}={v:.3f}" for k, v in rows.items()), flush=True)
    return rows

results = {}
for method, lam in (("erm_lambda0", 0.0), ("lad", 0.1)):
    tcfg = TR.TrainConfig(method=method, lam=lam, epochs=8, batch_size=16, seed=3)
    snap, runlog, timing = TR.train(tcfg, dataset, encoder, mcfg, codebook)
    fin = [r for r in runlog if r["type"] == "final"][0]
    print(f"{method} trained {timing['wall_seconds']:.0f}s best_val={fin['best_val_dice']:.3f}", flush=True)
    results[method] = evaluate(snap, method)

d = results["lad"]["avg_ood"] - results["erm_lambda0"]["avg_ood"]
dp = results["erm_lambda0"]["probe"] - results["lad"]["probe"]
print(f"\nLAD-ERM avg OOD dice delta: {d:+.3f}  probe drop: {dp:+.3f}  total {time.time()-t0:.0f}s", flush=True)
