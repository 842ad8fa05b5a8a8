"""Sharper frozen features: gentler pretraining styles + a stronger
reconstruction decoder + more epochs. Measures recon MSE then seg dice."""
import sys
import time

import numpy as np

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import tensor as T
from causalseg import trainer as TR
from causalseg.optim import Adam
from causalseg.styletext import AttributeCodebook
from causalseg.util import derive_seed

base = sg.default_benchmark_config(master_seed=2024, samples_per_domain=600,
                                   test_samples_per_domain=100)
clean_source = sg.DomainSpec(name="ct_mild", contrast=(1.0, 1.0))
dcfg = sg.DatasetConfig(**{**base.__dict__, "source_domains": (clean_source,)})
dataset = sg.generate_dataset(dcfg)
mcfg = M.ModelConfig()

# gentler pool: full modality/contrast span, milder noise/bias, rare artifacts
def gentle_pool(cfg, count, seed):
    items = []
    for i in range(count):
        content_seed = derive_seed(cfg.master_seed, "content", "pool", seed, i)
        clean, mask = sg.render_content(content_seed, cfg)
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "pool-style", i)))
        d = sg.StyleDescriptor(
            modality_tag=sg.MODALITY_TAGS[int(rng.integers(0, 4))],
            contrast=float(rng.uniform(0.5, 2.0)),
            noise_kind=sg.NOISE_KINDS[int(rng.integers(0, 3))],
            noise_level=float(rng.uniform(0.0, 0.12)),
            bias_strength=float(rng.uniform(0.0, 0.35)),
            artifact_tags=frozenset(t for t in sg.ARTIFACT_TAGS if rng.uniform() < 0.05),
        ).validate()
        items.append((sg.apply_style(clean, d, derive_seed(seed, "pn", i)), clean, mask))
    return items

t0 = time.time()
pool = gentle_pool(dcfg, 500, seed=1)

# stronger recon decoder
def init_recon_big(cfg, seed):
    from causalseg.util import rng_from
    rng = rng_from(seed, "recon-init")
    p = {}
    c_in = cfg.bottleneck_channels
    for i, c_out in enumerate((32, 16, 12)):
        p[f"st{i}.w"] = M._he_conv(rng, c_out, c_in, 3, 3)
        p[f"st{i}.b"] = M._zeros(c_out)
        c_in = c_out
    p["head.w"] = M._he_conv(rng, 1, c_in, 1, 1)
    p["head.b"] = M._zeros(1)
    return p

enc = M.init_encoder(mcfg, 7)
rec = init_recon_big(mcfg, 7)
opt = Adam(M.param_list(enc) + M.param_list(rec), lr=2e-3)
rng = np.random.default_rng(0)
fit, held = pool[:-40], pool[-40:]
for epoch in range(10):
    idx = rng.permutation(len(fit))
    for i in range(0, len(fit) - 15, 16):
        chunk = [fit[j] for j in idx[i:i + 16]]
        x = T.Tensor(np.stack([c[0] for c in chunk])[:, None])
        tgt = T.Tensor(np.stack([c[1] for c in chunk])[:, None])
        opt.zero_grad()
        with T.Tape():
            out = M.recon_forward(rec, mcfg, M.encoder_forward(enc, mcfg, x))
            e = T.sub(out, tgt)
            loss = T.reduce_mean(T.mul(e, e))
            T.backward(loss)
        opt.step()
    hx = T.Tensor(np.stack([c[0] for c in held])[:, None])
    htgt = np.stack([c[1] for c in held])[:, None]
    hout = M.recon_forward(rec, mcfg, M.encoder_forward(enc, mcfg, hx)).data
    print(f"epoch {epoch} heldout mse {((hout - htgt) ** 2).mean():.4f} ({time.time()-t0:.0f}s)", flush=True)

# freeze + standardize (mirror pretrain_encoder's tail)
acc = []
for i in range(0, 128, 16):
    chunk = pool[i:i + 16]
    x = T.Tensor(np.stack([c[0] for c in chunk])[:, None])
    acc.append(M.encoder_forward(enc, mcfg, x).data)
feats = np.concatenate(acc, axis=0)
mu = feats.mean(axis=(0, 2, 3))
sigma = np.maximum(feats.std(axis=(0, 2, 3)), 1e-3)
enc["norm.scale"] = T.Tensor(1.0 / sigma)
enc["norm.shift"] = T.Tensor(-mu / sigma)
M.set_requires_grad(enc, False)

codebook = AttributeCodebook.create(1)
tcfg = TR.TrainConfig(method="erm_lambda0", lr=3e-3, epochs=16, batch_size=16, seed=3)
snap, runlog, timing = TR.train(tcfg, dataset, enc, mcfg, codebook)
ep = [r["val_dice"] for r in runlog if r["type"] == "epoch"]
print(f"sharp-pretrain: traj {[f'{v:.3f}' for v in ep[::2]]} best={max(ep):.3f}", flush=True)
