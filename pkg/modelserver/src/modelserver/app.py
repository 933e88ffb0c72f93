"""FastAPI application implementing the prediction/activations protocol.

POST /predict     {"image_png_b64": ...} -> {"probs": [...], "labels": [...]?}
POST /activations {"image_png_b64": ...} -> {"layers": [{"name", "values"}...]}
GET  /info        -> model metadata incl. num_classes and input_size

Preprocessing happens server-side (decode, resize to the model input,
scale to [0,1], channel normalization), so attack clients composite at
native host resolution.  Inference is serialized behind a lock and runs
with fixed weights in eval mode, so identical request bodies yield
identical probabilities.
"""

from __future__ import annotations

import base64
import binascii
import io
import threading

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from .models import ActivationCapture, ServerConfig, build_model


class BadRequest(ValueError):
    pass


def _decode_image(payload: dict, config: ServerConfig) -> torch.Tensor:
    if not isinstance(payload, dict) or "image_png_b64" not in payload:
        raise BadRequest("request body must be JSON with an 'image_png_b64' field")
    try:
        raw = base64.b64decode(payload["image_png_b64"], validate=True)
    except (binascii.Error, TypeError) as exc:
        raise BadRequest(f"image_png_b64 is not valid base64: {exc}") from exc
    try:
        with Image.open(io.BytesIO(raw)) as img:
            rgb = img.convert("RGB").resize(config.input_size, Image.BILINEAR)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise BadRequest(f"payload is not a decodable image: {exc}") from exc
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    mean, std = config.normalization
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def create_app(config: ServerConfig) -> FastAPI:
    model = build_model(config)
    capture = ActivationCapture(model, config.exposed_layers)
    inference_lock = threading.Lock()
    app = FastAPI(title="advmark model server")

    def infer(batch: torch.Tensor, with_activations: bool):
        with inference_lock, torch.no_grad():
            logits = model(batch)
            activations = capture.collect() if with_activations else None
        probs = torch.softmax(logits[0], dim=0).tolist()
        return probs, activations

    @app.exception_handler(BadRequest)
    async def bad_request_handler(_request: Request, exc: BadRequest):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(Exception)
    async def failure_handler(_request: Request, exc: Exception):
        return JSONResponse(status_code=500, content={"error": f"inference failed: {exc}"})

    @app.get("/info")
    def info():
        mean, std = config.normalization
        return {
            "num_classes": config.num_classes,
            "input_size": list(config.input_size),
            "model": config.model,
            "weights": config.weights,
            "layers": list(config.exposed_layers),
            "preprocessing": {
                "resize": list(config.input_size),
                "scale": "1/255",
                "normalize_mean": list(mean),
                "normalize_std": list(std),
            },
        }

    @app.post("/predict")
    async def predict(request: Request):
        payload = await _json_body(request)
        batch = _decode_image(payload, config)
        probs, _ = infer(batch, with_activations=False)
        body = {"probs": probs}
        if config.labels is not None:
            body["labels"] = list(config.labels)
        return body

    @app.post("/activations")
    async def activations(request: Request):
        payload = await _json_body(request)
        batch = _decode_image(payload, config)
        _, collected = infer(batch, with_activations=True)
        return {"layers": [{"name": name, "values": values} for name, values in collected]}

    async def _json_body(request: Request) -> dict:
        try:
            return await request.json()
        except Exception as exc:
            raise BadRequest(f"request body is not JSON: {exc}") from exc

    return app
