"""FastAPI application wiring the core package to HTTP endpoints.

Domain errors (bad configs, malformed data files) surface as HTTP 400 with
the original diagnostic; schema violations (unknown keys, wrong types) are
rejected by pydantic as HTTP 422 before any handler runs.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from .. import autodiff as ad
from ..attention import AttentiveConv, DEFAULT_GATES, saturation_sweep
from ..costs import count_costs
from ..data import DataCorruptionError, DataFormatError, load_cifar10
from ..diagnostics import grad_check_trials
from ..models import AttentionSpec, ModelConfig, build_model
from ..training import TrainConfig, train_eval
from . import schemas

GRAD_CHECK_THRESHOLD = 1e-4

PRESETS: dict[str, dict] = {
    # Full-scale recipes from the original experiments; provided for users
    # with the compute to run them.
    "imagenet-paper": {
        "model": {
            "variant": "imagenet",
            "width_multiplier": 1.0,
            "num_classes": 1000,
            "classifier_dropout": 0.2,
            "attention": {"mechanism": "sb", "placement": ["c1", "c2", "c3"]},
        },
        "train": {
            "lr0": 0.1,
            "schedule": "linear",
            "epochs": 300,
            "batch_size": 256,
            "momentum": 0.9,
            "weight_decay": 4e-5,
            "seed": 0,
        },
    },
    "cifar-paper": {
        "model": {
            "variant": "cifar",
            "width_multiplier": 1.0,
            "num_classes": 10,
            "classifier_dropout": 0.2,
            "attention": {
                "mechanism": "sb",
                "placement": ["c1", "c2", "c3"],
                "branch_dropout": 0.2,
            },
        },
        "train": {
            "lr0": 0.1,
            "schedule": "cosine",
            "epochs": 200,
            "batch_size": 128,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "seed": 0,
        },
    },
    # Desk-scale run: finishes in minutes on a laptop CPU and still shows
    # the balance weights moving and accuracy well above chance.
    "desk-sb-toy": {
        "model": {
            "variant": "toy",
            "num_classes": 10,
            "classifier_dropout": 0.0,
            "attention": {"mechanism": "sb", "placement": ["c1", "c2", "c3"]},
        },
        "train": {
            "lr0": 0.05,
            "schedule": "cosine",
            "epochs": 10,
            "batch_size": 128,
            "momentum": 0.9,
            "weight_decay": 5e-4,
            "seed": 0,
            "subset_size": 2000,
            "test_subset_size": 1000,
        },
    },
}

_DOMAIN_ERRORS = (
    ad.ConfigError,
    ad.ShapeError,
    ad.StatisticsError,
    DataFormatError,
    DataCorruptionError,
)


def to_model_config(m: schemas.ModelConfigModel, branch_dropout: float | None = None) -> ModelConfig:
    att = m.attention
    return ModelConfig(
        variant=m.variant,
        width_multiplier=m.width_multiplier,
        num_classes=m.num_classes,
        input_resolution=m.input_resolution,
        classifier_dropout=m.classifier_dropout,
        attention=AttentionSpec(
            mechanism=att.mechanism,
            gate=att.gate,
            placement=tuple(att.placement),
            balance_init=att.balance_init,
            n_experts=att.n_experts,
            temperature=att.temperature,
            branch_dropout=att.branch_dropout if branch_dropout is None else branch_dropout,
        ),
    )


def create_app() -> FastAPI:
    app = FastAPI(title="attnlab", version=__version__)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/presets")
    def presets() -> dict[str, dict]:
        # validate on the way out so presets can never drift from the schema
        return {
            name: schemas.ExperimentConfig.model_validate(cfg).model_dump()
            for name, cfg in PRESETS.items()
        }

    @app.post("/costs", response_model=schemas.CostResponse)
    def costs(req: schemas.CostRequest):
        try:
            model = build_model(to_model_config(req.model), seed=req.model.seed)
            return count_costs(model).to_json_dict()
        except _DOMAIN_ERRORS as err:
            raise HTTPException(status_code=400, detail=str(err))

    @app.post("/grad-check", response_model=schemas.GradCheckResponse)
    def grad_check(req: schemas.GradCheckRequest):
        gate = req.gate or DEFAULT_GATES.get(req.mechanism, "sigmoid")
        try:
            result = grad_check_trials(
                req.mechanism, gate, req.trials, seed=req.seed, eps=req.eps
            )
        except _DOMAIN_ERRORS as err:
            raise HTTPException(status_code=400, detail=str(err))
        result["threshold"] = GRAD_CHECK_THRESHOLD
        result["passed"] = result["max_rel_err"] < GRAD_CHECK_THRESHOLD
        return result

    @app.post("/saturation-sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest):
        gate = req.gate or DEFAULT_GATES[req.mechanism]
        rng = np.random.default_rng(req.seed)
        try:
            unit = AttentiveConv(
                req.channels, req.channels, 3, padding=1,
                mechanism=req.mechanism, gate=gate,
                rng=np.random.default_rng(req.seed + 1), name="probe",
            )
            x = rng.standard_normal((2, req.channels, req.spatial, req.spatial))
            points = saturation_sweep(unit, x, list(req.offsets))
        except _DOMAIN_ERRORS as err:
            raise HTTPException(status_code=400, detail=str(err))
        return {
            "mechanism": req.mechanism,
            "gate": gate,
            "rows": [dataclasses.asdict(p) for p in points],
        }

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        cfg = req.config
        if cfg.train is None:
            raise HTTPException(status_code=400, detail="config has no 'train' section")
        if cfg.model.variant == "imagenet":
            raise HTTPException(
                status_code=400,
                detail="no imagenet ingestion pipeline ships; train the cifar or toy variants",
            )
        data_dir = Path(req.data_dir)
        t = cfg.train
        try:
            train_cfg = TrainConfig(
                lr0=t.lr0,
                batch_size=t.batch_size,
                epochs=t.epochs,
                schedule=t.schedule,
                momentum=t.momentum,
                weight_decay=t.weight_decay,
                seed=t.seed,
                subset_size=t.subset_size,
                test_subset_size=t.test_subset_size,
                attention_dropout=t.attention_dropout,
            )
            model_cfg = to_model_config(
                cfg.model,
                branch_dropout=t.attention_dropout if t.attention_dropout > 0 else None,
            )
            if model_cfg.resolution != 32:
                raise ad.ConfigError(
                    f"training data is 32x32; model resolution is {model_cfg.resolution}"
                )
            model = build_model(model_cfg, seed=cfg.model.seed)
            train_ds = load_cifar10(data_dir, "train", subset_size=t.subset_size, seed=t.seed)
            test_ds = load_cifar10(data_dir, "test", subset_size=t.test_subset_size, seed=t.seed)
            report = train_eval(model, train_ds, test_ds, train_cfg, augment=t.augment)
        except FileNotFoundError as err:
            raise HTTPException(status_code=400, detail=str(err))
        except _DOMAIN_ERRORS as err:
            raise HTTPException(status_code=400, detail=str(err))
        except ad.NumericError as err:
            raise HTTPException(status_code=400, detail=f"training aborted: {err}")
        return report.to_json_dict()

    return app
