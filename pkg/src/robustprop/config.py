"""Experiment configuration: defaults, validation, JSON round-trip and hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

OUTPUT_ENV = "ROBUSTPROP_OUT"

MODULES = ("adversarial", "attention", "residual", "diffusion", "ssl", "temporal", "edge_features")


def default_sbm() -> dict:
    return dict(n=200, blocks=2, p_intra=0.1, p_inter=0.01, feature_dim=16, feature_noise=1.0)


def default_modules() -> dict:
    return dict(adversarial=True, attention=True, residual=True, diffusion=True, ssl=True,
                temporal=False, edge_features=True)


@dataclass
class ExperimentConfig:
    # graph source: a text-format file, or SBM parameters when graph_file is None
    graph_file: Optional[str] = None
    sbm: dict = field(default_factory=default_sbm)
    # labels: fraction of known nodes used for training, or an explicit count
    label_rate: float = 0.15
    n_labeled: Optional[int] = None
    val_fraction: float = 0.2
    # adversarial nets
    lr_gan: float = 1e-4
    weight_decay: float = 1e-5
    critic_steps: int = 5
    gp_coeff: float = 10.0
    delta: float = 0.10
    gen_hidden: int = 64
    disc_hidden: int = 32
    disc_layers: int = 2
    # spectral safeguards and residual correction
    T: int = 20
    residual_tol: float = 1e-8
    ceiling: float = 0.98
    epsilon: float = 1e-4
    norm_iters: int = 1000
    residual_mode: str = "error"
    z0_mode: str = "uniform"
    with_self_loops: bool = True
    # encoder and contrastive objective
    K_scales: int = 3
    enc_hidden: int = 64
    d_enc: int = 64
    tau: float = 0.3
    negatives: int = 64
    aug_dropout: float = 0.2
    proj_hidden: int = 256
    proj_dim: int = 64
    batch: int = 1024
    lambda_ssl: float = 0.1
    lr_model: float = 5e-3
    # attention
    heads: int = 8
    head_dim: int = 64
    attn_dropout: float = 0.1
    support_threshold: float = 1e-3
    # diffusion, fusion, ensemble
    gamma: float = 0.5
    diffusion_max: int = 50
    diffusion_tol: float = 1e-6
    rho: float = 0.5
    kappas: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    fit_ensemble: bool = False
    # run control
    seeds: list = field(default_factory=lambda: [0])
    epochs: int = 50
    enabled_modules: dict = field(default_factory=default_modules)
    mc_perturbations: int = 0
    causal_splits: int = 3
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ValueError(f"invalid config: {msg}")

        for name in ("lr_gan", "lr_model", "tau", "epsilon", "residual_tol", "diffusion_tol"):
            need(getattr(self, name) > 0, f"{name} must be positive")
        for name in ("weight_decay", "gp_coeff", "lambda_ssl"):
            need(getattr(self, name) >= 0, f"{name} must be non-negative")
        for name in ("critic_steps", "T", "heads", "head_dim", "diffusion_max", "norm_iters",
                     "enc_hidden", "d_enc", "proj_hidden", "proj_dim", "batch", "gen_hidden",
                     "disc_hidden", "disc_layers", "causal_splits"):
            need(int(getattr(self, name)) >= 1, f"{name} must be >= 1")
        for name in ("epochs", "K_scales", "negatives", "mc_perturbations"):
            need(int(getattr(self, name)) >= 0, f"{name} must be >= 0")
        need(0.0 < self.ceiling < 1.0, "ceiling must lie in (0, 1)")
        for name in ("delta", "gamma", "rho", "aug_dropout"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        need(0.0 <= self.attn_dropout < 1.0, "attn_dropout must lie in [0, 1)")
        need(0.0 < self.label_rate <= 1.0, "label_rate must lie in (0, 1]")
        need(0.0 <= self.val_fraction < 1.0, "val_fraction must lie in [0, 1)")
        need(self.n_labeled is None or int(self.n_labeled) >= 1, "n_labeled must be >= 1")
        need(self.residual_mode in ("error", "literal"), "residual_mode is 'error' or 'literal'")
        need(self.z0_mode in ("uniform", "zero"), "z0_mode is 'uniform' or 'zero'")
        need(len(self.kappas) == 3 and all(k >= 0 for k in self.kappas)
             and abs(sum(self.kappas) - 1.0) <= 1e-9, "kappas: three non-negative weights summing to 1")
        need(len(self.seeds) >= 1, "at least one seed")
        unknown = set(self.enabled_modules) - set(MODULES)
        need(not unknown, f"unknown modules {sorted(unknown)}")
        self.enabled_modules = {**default_modules(), **self.enabled_modules}
        if self.graph_file is None:
            unknown = set(self.sbm) - set(default_sbm())
            need(not unknown, f"unknown sbm keys {sorted(unknown)}")
            self.sbm = {**default_sbm(), **self.sbm}
            need(0 <= self.sbm["p_intra"] <= 1 and 0 <= self.sbm["p_inter"] <= 1,
                 "sbm probabilities must lie in [0, 1]")
            need(1 <= self.sbm["blocks"] <= self.sbm["n"], "sbm needs 1 <= blocks <= n")

    def enabled(self, module: str) -> bool:
        return bool(self.enabled_modules.get(module, False))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"invalid config: unknown keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location and seeds excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolve_output(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ENV, "runs"))
