import base64
import io
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient

from causalseg import service as SV
from causalseg import trainer as TR
from causalseg.model import params_hash
from causalseg.reasoner import compact_identity, ReasonerModel
from causalseg.tensor import Tensor


@pytest.fixture(scope="module")
def app_client(trained_micro, tmp_path_factory):
    path = tmp_path_factory.mktemp("svc") / "model.cslm"
    TR.save_snapshot(trained_micro["snapshot"], path)
    snapshot = TR.load_snapshot(path)
    reasoner = ReasonerModel(
        num_classes=4, widths=snapshot.model.cfg.dec_channels, hidden=4,
        params={
            "w1": Tensor(np.zeros((11, 4))),
            "b1": Tensor(np.zeros(4)),
            "w2": Tensor(np.full((4, 6), 0.0)),
            "b2": Tensor(compact_identity(3) + np.array([0, 0, -0.3, 0, 0, -0.1])),
        },
    )
    app = SV.create_app(snapshot, snapshot_path=path, reasoner=reasoner,
                        dataset=trained_micro["dataset"])
    client = TestClient(app)
    return {"client": client, "snapshot": snapshot, "path": path,
            "dataset": trained_micro["dataset"]}


# ---------------------------------------------------------------------------
# wire format helpers


def test_rle_round_trip():
    rng = np.random.default_rng(0)
    mask = (rng.uniform(size=(16, 16)) * 4).astype(np.uint8)
    rle = SV.mask_to_rle(mask)
    back = SV.rle_to_mask(rle)
    assert np.array_equal(back, mask)
    assert sum(c for _, c in rle["runs"]) == mask.size


def test_png16_round_trip_within_quantization():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16))
    decoded = SV.png16_b64_to_image(SV.image_to_png16_b64(img))
    assert np.abs(decoded - img).max() <= 0.5 / 65535 + 1e-12


# ---------------------------------------------------------------------------
# /segment


def test_segment_known_sample(app_client):
    r = app_client["client"].post("/v1/segment", json={"sample_id": "id/0"})
    assert r.status_code == 200
    body = r.json()
    assert body["mask_rle"]["shape"] == [16, 16]
    assert 0.0 <= body["dice"] <= 1.0
    assert body["snapshot_hash"] == SV.file_sha256(app_client["path"])
    assert body["session_id"]


def test_segment_deterministic(app_client):
    c = app_client["client"]
    a = c.post("/v1/segment", json={"sample_id": "id/1"}).json()
    b = c.post("/v1/segment", json={"sample_id": "id/1"}).json()
    a.pop("session_id"), b.pop("session_id")
    assert a == b


def test_segment_unknown_sample_404(app_client):
    r = app_client["client"].post("/v1/segment", json={"sample_id": "nope/99"})
    assert r.status_code == 404
    assert r.json()["error"]["code"] == "unknown_sample"


def test_segment_raw_image_and_wrong_size(app_client):
    img = np.random.default_rng(2).uniform(size=(16, 16))
    r = app_client["client"].post(
        "/v1/segment", json={"image": SV.image_to_png16_b64(img)}
    )
    assert r.status_code == 200
    big = np.zeros((32, 32))
    r = app_client["client"].post(
        "/v1/segment", json={"image": SV.image_to_png16_b64(big)}
    )
    assert r.status_code == 422


def test_segment_malformed_400(app_client):
    r = app_client["client"].post(
        "/v1/segment", content=b"not json",
        headers={"content-type": "application/json"},
    )
    assert r.status_code == 400


def test_oversize_413(app_client):
    r = app_client["client"].post(
        "/v1/segment", content=b"0" * 10,
        headers={"content-type": "application/json",
                 "content-length": str(10 * 1024 * 1024)},
    )
    assert r.status_code == 413


# ---------------------------------------------------------------------------
# /intervene


def test_intervene_identity_matches_segment(app_client):
    c = app_client["client"]
    seg = c.post("/v1/segment", json={"sample_id": "t2_noisy/0"}).json()
    r = c.post("/v1/intervene", json={"session_id": seg["session_id"],
                                      "command_text": "identity"})
    assert r.status_code == 200
    body = r.json()
    assert body["mask_rle"] == seg["mask_rle"]
    assert body["dice_after"] == seg["dice"]


def test_intervene_parse_error_with_position(app_client):
    c = app_client["client"]
    seg = c.post("/v1/segment", json={"sample_id": "id/0"}).json()
    r = c.post("/v1/intervene", json={"session_id": seg["session_id"],
                                      "command_text": "shrink class="})
    assert r.status_code == 400
    err = r.json()["error"]
    assert err["code"] == "parse_error"
    assert err["position"] == 7
    assert "syntax" in err["grammar"]


def test_intervene_without_sample_409(app_client):
    r = app_client["client"].post(
        "/v1/intervene", json={"session_id": "sX", "command_text": "denoise"}
    )
    assert r.status_code == 409


def test_intervene_modulates_and_logs_history(app_client):
    c = app_client["client"]
    seg = c.post("/v1/segment", json={"sample_id": "inverted_bias/2"}).json()
    r = c.post("/v1/intervene", json={"session_id": seg["session_id"],
                                      "command_text": "denoise amount=0.9"})
    body = r.json()
    assert body["parsed_command"]["verb"] == "suppress_noise"
    assert body["history_length"] == 1
    r2 = c.post("/v1/intervene", json={"session_id": seg["session_id"],
                                       "command_text": "sharpen amount=0.2"})
    assert r2.json()["history_length"] == 2


def test_model_weights_untouched_by_requests(app_client):
    snap = app_client["snapshot"]
    before = (params_hash(snap.model.adapter), params_hash(snap.model.decoder))
    c = app_client["client"]
    seg = c.post("/v1/segment", json={"sample_id": "id/3"}).json()
    c.post("/v1/intervene", json={"session_id": seg["session_id"],
                                  "command_text": "shrink class=1 amount=1"})
    after = (params_hash(snap.model.adapter), params_hash(snap.model.decoder))
    assert before == after


def test_concurrent_interventions_match_serial(app_client):
    c = app_client["client"]
    sids = []
    for i in range(4):
        seg = c.post("/v1/segment", json={"sample_id": f"id/{i}"}).json()
        sids.append(seg["session_id"])
    cmds = ["denoise amount=0.8", "sharpen amount=0.5",
            "shrink class=2 amount=0.7", "restore amount=0.4"]
    serial = [
        c.post("/v1/intervene", json={"session_id": s, "command_text": t}).json()["mask_rle"]
        for s, t in zip(sids, cmds)
    ]
    with ThreadPoolExecutor(max_workers=4) as ex:
        parallel = list(ex.map(
            lambda st: c.post("/v1/intervene",
                              json={"session_id": st[0], "command_text": st[1]}
                              ).json()["mask_rle"],
            zip(sids, cmds),
        ))
    assert serial == parallel


# ---------------------------------------------------------------------------
# /sample and /model/info


def test_sample_stable_and_corruptible(app_client):
    c = app_client["client"]
    a = c.get("/v1/sample", params={"domain": "t2_noisy", "index": 5}).json()
    b = c.get("/v1/sample", params={"domain": "t2_noisy", "index": 5}).json()
    assert a == b
    r = c.get("/v1/sample", params={"domain": "t2_noisy", "index": 5,
                                    "corruption": "heavy_noise"})
    body = r.json()
    assert body["induced_corruption"]["kind"] == "heavy_noise"
    # corrupted sample is segmentable via its returned id
    seg = c.post("/v1/segment", json={"sample_id": body["sample_id"]})
    assert seg.status_code == 200


def test_sample_unknown_domain_404(app_client):
    r = app_client["client"].get("/v1/sample", params={"domain": "marsscan"})
    assert r.status_code == 404


def test_sample_png_lossless_to_quantization(app_client):
    c = app_client["client"]
    body = c.get("/v1/sample", params={"domain": "id", "index": 2}).json()
    decoded = SV.png16_b64_to_image(body["image_png"])
    original = app_client["dataset"].id_test[2].image
    assert np.abs(decoded - original).max() <= 0.5 / 65535 + 1e-12


def test_model_info(app_client):
    r = app_client["client"].get("/v1/model/info").json()
    assert r["snapshot_hash"] == SV.file_sha256(app_client["path"])
    for verb in ("shrink", "expand", "suppress_noise", "restore_region",
                 "sharpen_boundary", "identity"):
        assert verb in r["grammar_help"]
    again = app_client["client"].get("/v1/model/info").json()
    assert r == again
