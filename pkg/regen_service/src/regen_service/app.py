"""FastAPI application implementing the regeneration wire protocol.

Endpoints:

* ``POST /v1/regenerate`` — body ``{image_b64, strength, steps, seed
  [, prompt][, upscale]}`` returns ``{image_b64}``.  Malformed bodies
  (bad JSON, missing/ill-typed fields, undecodable base64) answer 400,
  a strength outside [0, 1] answers 422, and a backend whose model is
  not loaded answers 503 — always as ``{"error": ...}``.
* ``GET /v1/health`` — ``{status, model_id}``.

Regeneration requests are serialized per model instance with a lock; the
caller's timeout governs overall latency.
"""

from __future__ import annotations

import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ValidationError

from regen_service.backends import BackendError
from regen_service.codec import decode_image_b64, encode_image_b64


class RegenBody(BaseModel):
    image_b64: str
    strength: float
    steps: int = 100
    seed: int = 0
    prompt: str | None = None
    upscale: bool = False


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(backend) -> FastAPI:
    app = FastAPI(title="regen-service", version="0.1.0")
    lock = threading.Lock()
    app.state.backend = backend

    @app.get("/v1/health")
    def health():
        status = "ok" if backend.loaded else "unavailable"
        return {"status": status, "model_id": backend.model_id}

    @app.post("/v1/regenerate")
    async def regenerate(request: Request):
        try:
            payload = await request.json()
        except Exception:
            return _error(400, "body is not valid JSON")
        if not isinstance(payload, dict):
            return _error(400, "body must be a JSON object")
        try:
            body = RegenBody.model_validate(payload)
        except ValidationError as exc:
            first = exc.errors()[0]
            where = ".".join(str(p) for p in first["loc"]) or "body"
            return _error(400, f"malformed body: {where}: {first['msg']}")

        if not 0.0 <= body.strength <= 1.0:
            return _error(422, f"strength {body.strength} outside [0, 1]")
        try:
            image = decode_image_b64(body.image_b64)
        except ValueError as exc:
            return _error(400, str(exc))

        if not backend.loaded:
            return _error(503, f"model not loaded: {backend.model_id}")
        try:
            with lock:
                out = backend.regenerate(image, body.strength, body.steps,
                                         body.seed, prompt=body.prompt,
                                         upscale=body.upscale)
        except BackendError as exc:
            return _error(503, str(exc))
        return {"image_b64": encode_image_b64(out)}

    return app
