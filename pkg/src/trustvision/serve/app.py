"""HTTP prediction service."""

from __future__ import annotations

import base64
import binascii
import io
import json
import math
import os
import threading
import time
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from PIL import Image, UnidentifiedImageError

from ..core import ClassSet
from ..nnkit.layers import softmax_stable
from ..nnkit.vit import ModelCheckpoint, predict_logits
from ..trust import TrustCalibration, conformal_set, energy_score
from .ratelimit import SlidingWindowLimiter

MAX_BODY = 2 * 1024 * 1024


class BadRequest(ValueError):
    pass


@dataclass(frozen=True)
class LoadedModel:
    ckpt: ModelCheckpoint
    class_set: ClassSet
    version: str

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint, class_set: ClassSet | None = None) -> "LoadedModel":
        if not ckpt.has_head:
            raise ValueError("serving needs a checkpoint with a classifier head")
        if class_set is None:
            meta = ckpt.meta.get("class_set")
            class_set = ClassSet.from_dict(meta) if meta else ClassSet.generic(ckpt.arch.num_classes)
        if len(class_set) != ckpt.arch.num_classes:
            raise ValueError("class set size differs from head width")
        return cls(ckpt, class_set, ckpt.digest()[:12])


class Service:
    """Shared state: a read-only model plus an atomically swappable calibration snapshot."""

    def __init__(self, model: LoadedModel | None = None, calibration: TrustCalibration | None = None):
        self.model = model
        self._calibration = calibration or TrustCalibration()
        self._swap = threading.Lock()

    @property
    def calibration(self) -> TrustCalibration:
        return self._calibration

    def swap_calibration(self, calibration: TrustCalibration) -> None:
        with self._swap:
            self._calibration = calibration

    def logits_for(self, body: dict) -> np.ndarray:
        arch = self.model.ckpt.arch
        present = [k for k in ("image", "array", "features") if body.get(k) is not None]
        if len(present) != 1:
            raise BadRequest("give exactly one of image, array, features")
        kind = present[0]
        if kind == "features":
            vec = _float_vector(body["features"])
            mode = body.get("feature_kind", "logits")
            if mode == "logits":
                if vec.size != arch.num_classes:
                    raise BadRequest(f"logits need {arch.num_classes} values")
                return vec
            if mode == "embedding":
                if vec.size != arch.embed_dim:
                    raise BadRequest(f"embedding needs {arch.embed_dim} values")
                p = self.model.ckpt.params
                return vec @ p["head.w"] + p["head.b"]
            raise BadRequest("feature_kind must be 'logits' or 'embedding'")
        img = _decode_png(body["image"], arch) if kind == "image" else _decode_array(body["array"], arch)
        return predict_logits(self.model.ckpt, img[None])[0]

    def predict(self, body: dict) -> dict:
        top_k = body.get("top_k", 5)
        if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
            raise BadRequest("top_k must be a positive integer")
        force = body.get("force_top1_in_set", True)
        if not isinstance(force, bool):
            raise BadRequest("force_top1_in_set must be a boolean")
        calib = self._calibration  # one snapshot per request
        logits = self.logits_for(body)
        probs = softmax_stable(logits)
        order = sorted(range(probs.size), key=lambda i: (-probs[i], i))
        out = {"predictions": [self._record(i, probs[i]) for i in order[:top_k]],
               "conformal_set": None, "ood": None, "model_version": self.model.version,
               "calibration": calib.fingerprints()}
        if calib.conformal is not None:
            members = conformal_set(probs, calib.conformal)
            if force and not members:
                members = [(order[0], float(probs[order[0]]))]
            out["conformal_set"] = [self._record(i, p) for i, p in members]
        if calib.ood is not None:
            e = float(energy_score(logits, calib.ood.temperature))
            out["ood"] = {"energy": e, "is_ood": bool(e > calib.ood.threshold), "threshold": calib.ood.threshold}
        return out

    def _record(self, i: int, p: float) -> dict:
        t = self.model.class_set.taxa[i]
        return {"class_id": int(i), "scientific_name": t.scientific_name, "common_name": t.common_name,
                "probability": float(p)}


def _float_vector(values) -> np.ndarray:
    try:
        vec = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError):
        raise BadRequest("features must be a list of numbers") from None
    if vec.ndim != 1 or vec.size == 0 or not np.all(np.isfinite(vec)):
        raise BadRequest("features must be a nonempty flat list of finite numbers")
    return vec


def _decode_png(data, arch) -> np.ndarray:
    if not isinstance(data, str):
        raise BadRequest("image must be a base64 string")
    try:
        raw = base64.b64decode(data, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            if im.format != "PNG":
                raise BadRequest("image must be PNG")
            im = im.convert("L" if arch.in_chans == 1 else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (binascii.Error, UnidentifiedImageError, OSError):
        raise BadRequest("image is not valid base64 PNG") from None
    if arch.in_chans == 1:
        arr = arr[..., None]
    if arr.shape != (arch.image_size, arch.image_size, arch.in_chans):
        raise BadRequest(f"image must be {arch.image_size}x{arch.image_size}")
    return arr


def _decode_array(data, arch) -> np.ndarray:
    try:
        arr = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError):
        raise BadRequest("array must be nested lists of numbers") from None
    if arr.ndim == 2 and arch.in_chans == 1:
        arr = arr[..., None]
    if arr.shape != (arch.image_size, arch.image_size, arch.in_chans) or not np.all(np.isfinite(arr)):
        raise BadRequest(f"array must have shape {(arch.image_size, arch.image_size, arch.in_chans)}")
    return arr


def _error(status: int, message: str, headers=None) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status, headers=headers)


def create_app(service: Service | None = None, *, rate_limit: int = 30, window: float = 60.0,
               clock=time.monotonic, max_body: int = MAX_BODY) -> FastAPI:
    service = service or Service()
    limiter = SlidingWindowLimiter(rate_limit, window, clock)
    app = FastAPI(title="trustvision", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.service = service
    app.state.limiter = limiter

    @app.post("/v1/predict")
    async def predict(request: Request):
        t0 = time.perf_counter()
        key = request.headers.get("x-api-key") or (request.client.host if request.client else "unknown")
        adm = limiter.admit(key)
        if not adm.admitted:
            return _error(429, "rate limit exceeded", {"Retry-After": str(max(1, math.ceil(adm.retry_after)))})
        declared = request.headers.get("content-length")
        if declared is not None and declared.isdigit() and int(declared) > max_body:
            return _error(413, f"payload exceeds {max_body} bytes")
        raw = await request.body()
        if len(raw) > max_body:
            return _error(413, f"payload exceeds {max_body} bytes")
        if service.model is None:
            return _error(503, "model not loaded")
        try:
            body = json.loads(raw)
            if not isinstance(body, dict):
                raise BadRequest("body must be a JSON object")
            out = service.predict(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            return _error(400, "body is not valid JSON")
        except BadRequest as exc:
            return _error(400, str(exc))
        out["latency_ms"] = (time.perf_counter() - t0) * 1000.0
        return JSONResponse(out)

    @app.get("/v1/health")
    async def health():
        if service.model is None:
            return _error(503, "model not loaded")
        return {"status": "ok"}

    @app.get("/v1/model")
    async def model_info():
        if service.model is None:
            return _error(503, "model not loaded")
        m = service.model
        return {"model_version": m.version, "class_count": m.ckpt.arch.num_classes, "class_set": m.class_set.name,
                "stage": m.ckpt.stage, "image_size": m.ckpt.arch.image_size, "channels": m.ckpt.arch.in_chans,
                "calibration": service.calibration.fingerprints()}

    @app.exception_handler(404)
    async def not_found(request, exc):
        return Response(status_code=404)

    return app


def app_from_env(env=None) -> FastAPI:
    """Build the app from ``MODEL_PATH``, ``CALIB_PATH`` and ``RATE_LIMIT``."""
    env = os.environ if env is None else env
    model = None
    if env.get("MODEL_PATH"):
        model = LoadedModel.from_checkpoint(ModelCheckpoint.load(env["MODEL_PATH"]))
    calib = TrustCalibration.load(env["CALIB_PATH"]) if env.get("CALIB_PATH") else None
    return create_app(Service(model, calib), rate_limit=int(env.get("RATE_LIMIT", 30)))
