"""HTTP service: segmentation and language-command intervention over a
loaded model snapshot + reasoner, with dataset samples on tap for the UI.

The snapshot is immutable; FiLM modulation is applied per request and
never persisted. Sessions live in memory behind an LRU cap.
"""

from __future__ import annotations

import base64
import io
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import tensor as T
from .metrics import dice_score, hd95
from .model import FiLMParams
from .reasoner import (
    CommandParseError,
    ReasonerModel,
    grammar_help,
    parse_command,
    predict_film,
    rule_reasoner,
)
from .synthgen import CORRUPTION_KINDS, SplitSet, corrupt_for_intervention
from .trainer import ModelSnapshot, _predict_from_feats
from .util import file_sha256

MAX_SESSIONS = 256
MAX_BODY_BYTES = 4 * 1024 * 1024
API_PREFIX = "/v1"


@dataclass
class Session:
    session_id: str
    sample_id: str | None = None
    image: np.ndarray | None = None
    mask: np.ndarray | None = None
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# wire helpers


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-major run-length encoding: {shape, runs: [[value, count], ...]}."""
    flat = np.asarray(mask).ravel()
    runs = []
    if flat.size:
        change = np.nonzero(np.diff(flat))[0]
        starts = np.concatenate([[0], change + 1])
        ends = np.concatenate([change + 1, [flat.size]])
        runs = [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]
    return {"shape": list(mask.shape), "runs": runs}


def rle_to_mask(rle: dict) -> np.ndarray:
    total = int(np.prod(rle["shape"]))
    flat = np.empty(total, dtype=np.uint8)
    pos = 0
    for value, count in rle["runs"]:
        flat[pos : pos + count] = value
        pos += count
    if pos != total:
        raise ValueError("run lengths do not cover the mask")
    return flat.reshape(rle["shape"])


def image_to_png16_b64(image: np.ndarray) -> str:
    """[0,1] floats -> 16-bit grayscale PNG, base64."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    q = np.round(arr * 65535.0).astype("<u2")
    img = Image.frombytes("I;16", (q.shape[1], q.shape[0]), q.tobytes())
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def png16_b64_to_image(data: str) -> np.ndarray:
    img = Image.open(io.BytesIO(base64.b64decode(data)))
    arr = np.asarray(img, dtype=np.float64)
    return arr / 65535.0


# ---------------------------------------------------------------------------
# app state


class ServiceState:
    def __init__(self, snapshot: ModelSnapshot, snapshot_hash: str,
                 reasoner: ReasonerModel | None, dataset: SplitSet | None,
                 reasoner_backend: str = "learned"):
        self.snapshot = snapshot
        self.snapshot_hash = snapshot_hash
        self.reasoner = reasoner
        self.dataset = dataset
        self.reasoner_backend = reasoner_backend
        self.sessions: OrderedDict[str, Session] = OrderedDict()
        self.lock = threading.Lock()
        self._session_counter = 0
        self.samples = {}
        if dataset is not None:
            for dom_samples, name in [(dataset.id_test, "id")]:
                for i, s in enumerate(dom_samples):
                    self.samples[f"{name}/{i}"] = s
            for dom in sorted(dataset.ood_tests):
                for i, s in enumerate(dataset.ood_tests[dom]):
                    self.samples[f"{dom}/{i}"] = s

    def film_for(self, cmd) -> FiLMParams:
        if self.reasoner_backend == "rule" or self.reasoner is None:
            return rule_reasoner(cmd, self.snapshot.model)
        return predict_film(self.reasoner, cmd)

    def new_session(self) -> Session:
        with self.lock:
            self._session_counter += 1
            sid = f"s{self._session_counter:08d}"
            sess = Session(session_id=sid)
            self.sessions[sid] = sess
            while len(self.sessions) > MAX_SESSIONS:
                self.sessions.popitem(last=False)
            return sess

    def get_session(self, sid: str) -> Session | None:
        with self.lock:
            sess = self.sessions.get(sid)
            if sess is not None:
                self.sessions.move_to_end(sid)
            return sess


def _error(status: int, code: str, message: str, **extra):
    return JSONResponse(
        status_code=status,
        content={"error": {"code": code, "message": message, **extra}},
    )


def create_app(snapshot: ModelSnapshot, snapshot_path=None,
               reasoner: ReasonerModel | None = None,
               dataset: SplitSet | None = None,
               reasoner_backend: str = "learned",
               static_dir=None) -> FastAPI:
    snapshot_hash = file_sha256(snapshot_path) if snapshot_path else "unsaved"
    state = ServiceState(snapshot, snapshot_hash, reasoner, dataset,
                         reasoner_backend)
    app = FastAPI(title="causalseg service")
    app.state.service = state

    model = snapshot.model
    k = model.cfg.num_classes
    size = model.cfg.image_size

    def segment_image(image: np.ndarray, film: FiLMParams | None):
        feats = model.encode(image).data
        pred = _predict_from_feats(model, feats, film=film)[0]
        return feats, pred

    def metrics_for(pred, mask):
        if mask is None:
            return None, None
        dice = float(np.mean([dice_score(pred, mask, c) for c in range(1, k)]))
        hds = [hd95(pred, mask, c) for c in range(1, k)]
        finite = [h for h in hds if np.isfinite(h)]
        return dice, (float(np.mean(finite)) if finite else None)

    @app.middleware("http")
    async def body_size_guard(request: Request, call_next):
        length = request.headers.get("content-length")
        if length and int(length) > MAX_BODY_BYTES:
            return _error(413, "oversize", f"body exceeds {MAX_BODY_BYTES} bytes")
        return await call_next(request)

    @app.post(f"{API_PREFIX}/segment")
    async def segment(request: Request):
        if model is None:
            return _error(503, "model_not_loaded", "no model loaded")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "malformed", "body must be JSON")
        if not isinstance(body, dict):
            return _error(400, "malformed", "body must be a JSON object")

        mask = None
        sample_id = body.get("sample_id")
        if sample_id is not None:
            sample = state.samples.get(sample_id)
            if sample is None:
                return _error(404, "unknown_sample", f"sample_id {sample_id!r} not found")
            image, mask = sample.image, sample.mask
        elif "image" in body:
            try:
                image = png16_b64_to_image(body["image"])
            except Exception:
                return _error(400, "malformed", "image must be base64 16-bit PNG")
            if image.shape != (size, size):
                return _error(422, "wrong_size",
                              f"expected {size}x{size}, got {image.shape}")
        else:
            return _error(400, "malformed", "need sample_id or image")

        feats, pred = segment_image(image, None)
        dice, hd = metrics_for(pred, mask)

        sid = body.get("session_id")
        sess = state.get_session(sid) if sid else None
        if sess is None:
            sess = state.new_session()
        sess.sample_id = sample_id
        sess.image = image
        sess.mask = mask

        logits_note = {"classes": k, "film": "identity"}
        return {
            "session_id": sess.session_id,
            "mask_rle": mask_to_rle(pred),
            "logits_summary": logits_note,
            "dice": dice,
            "hd95": hd,
            "snapshot_hash": state.snapshot_hash,
        }

    @app.post(f"{API_PREFIX}/intervene")
    async def intervene(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error(400, "malformed", "body must be JSON")
        sid = body.get("session_id")
        sess = state.get_session(sid) if sid else None
        if sess is None or sess.image is None:
            return _error(409, "no_current_sample",
                          "session has no current sample; call /segment first")
        text = body.get("command_text", "")
        try:
            cmd = parse_command(text, num_classes=k)
        except CommandParseError as exc:
            return _error(400, "parse_error", exc.reason, position=exc.position,
                          grammar=grammar_help())

        film = None if cmd.verb == "identity" else state.film_for(cmd)
        feats, base_pred = segment_image(sess.image, None)
        pred = _predict_from_feats(model, feats, film=film)[0]
        dice_before, _ = metrics_for(base_pred, sess.mask)
        dice_after, hd_after = metrics_for(pred, sess.mask)

        entry = {
            "command": cmd.canonical_text(),
            "film_summary": (film or FiLMParams.identity(model.cfg.dec_channels)).summary(),
            "dice_before": dice_before,
            "dice_after": dice_after,
        }
        sess.history.append(entry)
        return {
            "session_id": sess.session_id,
            "mask_rle": mask_to_rle(pred),
            "parsed_command": {
                "verb": cmd.verb,
                "target_class": cmd.target_class,
                "magnitude": cmd.magnitude,
            },
            "film_summary": entry["film_summary"],
            "dice_before": dice_before,
            "dice_after": dice_after,
            "hd95_after": hd_after,
            "history_length": len(sess.history),
            "snapshot_hash": state.snapshot_hash,
        }

    @app.get(f"{API_PREFIX}/sample")
    async def sample(domain: str, index: int | None = None,
                     corruption: str | None = None, severity: float = 0.7):
        if state.dataset is None:
            return _error(503, "no_dataset", "service started without a dataset")
        pool_ids = sorted(sid for sid in state.samples if sid.startswith(f"{domain}/"))
        if not pool_ids:
            return _error(404, "unknown_domain", f"no samples for domain {domain!r}")
        if index is None:
            index = 0
        sid = f"{domain}/{index}"
        s = state.samples.get(sid)
        if s is None:
            return _error(404, "unknown_sample", f"{sid} out of range")
        induced = None
        image = s.image
        if corruption is not None:
            if corruption not in CORRUPTION_KINDS:
                return _error(400, "malformed",
                              f"unknown corruption {corruption!r}; known: {list(CORRUPTION_KINDS)}")
            corrupted, info = corrupt_for_intervention(s, corruption, severity)
            image = corrupted.image
            induced = {"kind": info.kind, "severity": info.severity}
            state.samples[f"{sid}#{corruption}@{severity:g}"] = corrupted
            sid = f"{sid}#{corruption}@{severity:g}"
        return {
            "sample_id": sid,
            "image_png": image_to_png16_b64(image),
            "ground_truth_rle": mask_to_rle(s.mask),
            "descriptor": s.descriptor.to_dict(),
            "induced_corruption": induced,
            "domain": s.domain,
            "snapshot_hash": state.snapshot_hash,
        }

    @app.get(f"{API_PREFIX}/model/info")
    async def model_info():
        if model is None:
            return _error(503, "model_not_loaded", "no model loaded")
        return {
            "snapshot_hash": state.snapshot_hash,
            "config": snapshot.config_echo,
            "model": model.cfg.to_dict(),
            "reasoner_backend": state.reasoner_backend,
            "grammar_help": grammar_help(),
            "num_classes": k,
            "image_size": size,
        }

    if static_dir is not None:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    return app
