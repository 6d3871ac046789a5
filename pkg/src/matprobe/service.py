"""HTTP service exposing probing and taxonomy queries.

The model snapshot is immutable; every request reads the same state, so
concurrent probes are consistent. Monte-Carlo seeds derive from a configured
base seed plus the request body hash unless the client supplies one.
"""

from __future__ import annotations

import hashlib
import io
import json
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import JSONResponse

from . import dataio as dio
from . import hiergat as hg
from . import probe as pb
from . import taxonomy as tx

__version__ = "0.1.0"


@dataclass
class ServiceConfig:
    checkpoint_path: str
    taxonomy_path: Optional[str] = None  # None: shipped default document
    properties_path: Optional[str] = None
    manifest_path: Optional[str] = None  # enables probing referenced samples
    bind: str = "127.0.0.1:8321"
    mc_dropout_rate: float = 0.2
    mc_samples: int = 32
    probe_threshold: float = 0.7
    max_upload_bytes: int = 32 * 1024 * 1024
    base_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.probe_threshold < 1.0):
            raise ValueError("probe threshold must be in (0,1)")

    @classmethod
    def load(cls, path) -> "ServiceConfig":
        import os

        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        for key in list(doc):
            env = os.environ.get(f"MATPROBE_{key.upper()}")
            if env is not None:
                doc[key] = type(doc[key])(env) if not isinstance(doc[key], str) else env
        for key, value in os.environ.items():
            if key.startswith("MATPROBE_"):
                name = key[len("MATPROBE_"):].lower()
                if name not in doc and name in cls.__dataclass_fields__:
                    doc[name] = value
        return cls(**doc)


@dataclass
class ServiceState:
    taxonomy: tx.Taxonomy
    model: hg.HierGatModel
    properties: dict[str, tx.MechanicalProperties]
    encoder: dio.EncoderHandle
    config: ServiceConfig
    manifest: Optional[dio.DatasetManifest] = None

    @classmethod
    def load(cls, config: ServiceConfig) -> "ServiceState":
        taxonomy = (
            tx.load_taxonomy_file(config.taxonomy_path)
            if config.taxonomy_path
            else tx.default_taxonomy()
        )
        model = hg.load_checkpoint(config.checkpoint_path, taxonomy)
        properties = (
            tx.load_properties(config.properties_path)
            if config.properties_path
            else tx.default_properties()
        )
        manifest = (
            dio.load_manifest(config.manifest_path, taxonomy)
            if config.manifest_path
            else None
        )
        return cls(
            taxonomy=taxonomy,
            model=model,
            properties=properties,
            encoder=dio.get_encoder(model.encoder_name),
            config=config,
            manifest=manifest,
        )


def create_app(state: ServiceState):
    app = FastAPI(title="matprobe", version=__version__, openapi_url=None, docs_url=None)

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        cid = uuid.uuid4().hex[:12]
        return JSONResponse(
            status_code=500,
            content={"error": "internal", "correlation_id": cid, "message": str(exc)},
        )

    def error(status: int, message: str):
        return JSONResponse(status_code=status, content={"error": message})

    @app.get("/healthz")
    def healthz():
        ckpt_hash = hashlib.sha256(
            Path(state.config.checkpoint_path).read_bytes()
        ).hexdigest()
        return {
            "version": __version__,
            "model_hash": ckpt_hash,
            "taxonomy_hash": state.taxonomy.content_hash(),
        }

    @app.get("/taxonomy")
    def taxonomy():
        return state.taxonomy.to_document()

    @app.get("/properties/{node_id}")
    def properties(node_id: str):
        if node_id not in state.taxonomy.nodes:
            return error(404, f"unknown node id {node_id!r}")
        if node_id not in state.properties:
            return error(404, f"no mechanical properties for {node_id!r}")
        p = state.properties[node_id]
        tags = tx.mechanical_summary(node_id, state.properties)
        return {
            "id": node_id,
            "name": state.taxonomy.nodes[node_id].name,
            "properties": {
                "density": list(p.density),
                "surface_roughness": list(p.surface_roughness),
                "youngs_modulus": list(p.youngs_modulus),
                "yield_strength": list(p.yield_strength) if p.yield_strength else None,
                "tensile_strength": list(p.tensile_strength),
                "poissons_ratio": list(p.poissons_ratio),
            },
            "tags": list(tags),
        }

    @app.post("/probe")
    async def probe_endpoint(
        x: int = Form(...),
        y: int = Form(...),
        threshold: Optional[float] = Form(None),
        seed: Optional[int] = Form(None),
        sample_id: Optional[str] = Form(None),
        image: Optional[UploadFile] = File(None),
    ):
        if (image is None) == (sample_id is None):
            return error(400, "provide exactly one of: image upload, sample_id")
        if image is not None:
            blob = await image.read()
            if len(blob) > state.config.max_upload_bytes:
                return error(413, "upload exceeds the configured size limit")
            import cv2

            raw = cv2.imdecode(np.frombuffer(blob, np.uint8), cv2.IMREAD_UNCHANGED)
            if raw is None:
                return error(400, "cannot decode uploaded image")
            if raw.ndim == 2:
                raw = raw[:, :, None].repeat(3, axis=2)
            scale = 65535.0 if raw.dtype == np.uint16 else 255.0
            img = dio.srgb_to_linear(raw[:, :, :3][:, :, ::-1].astype(np.float64) / scale)
            seed_material = blob
        else:
            if state.manifest is None:
                return error(400, "service has no manifest; upload an image instead")
            try:
                rec = state.manifest.record(sample_id)
            except dio.DataError:
                return error(404, f"unknown sample id {sample_id!r}")
            img = dio.read_image(state.manifest.path(rec.appearance))
            seed_material = sample_id.encode()
        h, w = img.shape[:2]
        if not (0 <= x < w and 0 <= y < h):
            return error(422, f"coordinate ({x},{y}) outside image {w}x{h}")
        if seed is None:
            digest = hashlib.sha256(
                seed_material + f"|{x}|{y}|{threshold}".encode()
            ).digest()
            seed = state.config.base_seed + int.from_bytes(digest[:4], "little")
        cfg = pb.McConfig(
            dropout_rate=state.config.mc_dropout_rate,
            num_samples=state.config.mc_samples,
            seed=int(seed),
        )
        result = pb.probe(
            img, (x, y), state.model, state.taxonomy,
            cfg=cfg,
            encoder=state.encoder,
            properties=state.properties,
            threshold=threshold if threshold is not None else state.config.probe_threshold,
        )
        body = result.to_json(state.taxonomy)
        body["seed"] = int(seed)
        return body

    @app.get("/spec")
    def spec():
        return {
            "service": "matprobe",
            "version": __version__,
            "routes": [
                {"method": "GET", "path": "/healthz"},
                {"method": "GET", "path": "/taxonomy"},
                {"method": "GET", "path": "/properties/{node_id}"},
                {"method": "POST", "path": "/probe"},
                {"method": "GET", "path": "/spec"},
            ],
        }

    return app


def serve(config: ServiceConfig):
    import uvicorn

    state = ServiceState.load(config)
    host, port = config.bind.rsplit(":", 1)
    uvicorn.run(create_app(state), host=host, port=int(port))
