import numpy as np
import pytest

from causalseg import model as M
from causalseg import synthgen as sg
from causalseg import trainer as TR
from causalseg.styletext import AttributeCodebook


def micro_model_cfg() -> M.ModelConfig:
    return M.ModelConfig(
        image_size=16, num_classes=4, enc_channels=(8, 12, 16),
        enc_extra_convs=(1, 1, 1), bottleneck_channels=16, adapter_channels=16,
        proj_hidden=32, embed_dim=64, dec_channels=(8, 6, 4),
    ).validate()


def micro_dataset_cfg() -> sg.DatasetConfig:
    base = sg.default_benchmark_config(
        master_seed=7, samples_per_domain=60, test_samples_per_domain=40, image_size=16
    )
    return sg.DatasetConfig(**{**base.__dict__, "min_class_pixels": 8}).validate()


@pytest.fixture(scope="session")
def microrig():
    """Small shared rig: dataset, pretrained frozen encoder, codebook."""
    dcfg = micro_dataset_cfg()
    mcfg = micro_model_cfg()
    dataset = sg.generate_dataset(dcfg)
    pool = sg.make_pretrain_pool(dcfg, 200, seed=11)
    encoder, _ = M.pretrain_encoder(pool, mcfg, epochs=1, seed=11)
    codebook = AttributeCodebook.create(11)
    return {
        "dcfg": dcfg,
        "mcfg": mcfg,
        "dataset": dataset,
        "encoder": encoder,
        "codebook": codebook,
    }


@pytest.fixture(scope="session")
def trained_micro(microrig):
    """A reasonably fit micro model (lad objective), shared read-only."""
    cfg = TR.TrainConfig(method="lad", lam=0.1, epochs=8, batch_size=8, seed=5)
    snapshot, runlog, _ = TR.train(
        cfg, microrig["dataset"], microrig["encoder"],
        microrig["mcfg"], microrig["codebook"],
    )
    return {"snapshot": snapshot, "runlog": runlog, **microrig}
