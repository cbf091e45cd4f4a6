"""Estimator-style facade over training and receding-horizon control.

DiffusionPolicy follows the scikit-learn parameter protocol (constructor
params mirrored as attributes, ``get_params``/``set_params``), so it works
with ``sklearn.base.clone`` and parameter search utilities without this
package depending on scikit-learn. ``fit`` trains the denoiser on a rollout
dataset; ``predict`` runs the rolling controller autoregressively over a
sequence of observations.
"""

from __future__ import annotations

import inspect
import tempfile
from pathlib import Path

import numpy as np

from .controller import ControllerConfig, RollingController
from .dataset import Dataset, load as load_dataset
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import make_schedule
from .guidance import GuidanceSpec
from .training import TrainConfig, train
from .validation import check_array, check_is_fitted
from .world import Scene


class DiffusionPolicy:
    """Guided state-action diffusion policy with a fit/predict surface."""

    def __init__(self, layers=4, heads=4, embed_dim=128, dropout=0.3,
                 history=4, horizon=32, action_horizon=16, levels=20,
                 emphasis_scale=5.0, projection_seed=7, attention="cloc",
                 noise_profile="cosine", steps=2000, batch_size=32, lr=3e-4,
                 weight_decay=1e-3, warmup_steps=200, mode="rolling",
                 state_rolling=14, action_rolling=4, seed=0, workdir=None):
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.dropout = dropout
        self.history = history
        self.horizon = horizon
        self.action_horizon = action_horizon
        self.levels = levels
        self.emphasis_scale = emphasis_scale
        self.projection_seed = projection_seed
        self.attention = attention
        self.noise_profile = noise_profile
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.mode = mode
        self.state_rolling = state_rolling
        self.action_rolling = action_rolling
        self.seed = seed
        self.workdir = workdir
        self.model_ = None
        self.norm_ = None
        self.train_result_ = None

    # -- sklearn parameter protocol --

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "DiffusionPolicy":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter '{key}' for DiffusionPolicy")
            setattr(self, key, value)
        return self

    # -- configuration assembly --

    def _model_config(self) -> DenoiserConfig:
        return DenoiserConfig(layers=self.layers, heads=self.heads,
                              embed_dim=self.embed_dim, dropout=self.dropout,
                              N=self.history, H=self.horizon,
                              H_a=self.action_horizon, K=self.levels,
                              emphasis_scale=self.emphasis_scale,
                              projection_seed=self.projection_seed,
                              attention=self.attention,
                              schedule=self.noise_profile)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(mode=self.mode, L_s=self.state_rolling,
                                L_a=self.action_rolling)

    # -- fitting and persistence --

    def fit(self, X, y=None) -> "DiffusionPolicy":
        """Train the denoiser. X is a Dataset or a path to a dataset file."""
        data = load_dataset(X) if isinstance(X, (str, Path)) else X
        if not isinstance(data, Dataset):
            raise TypeError("fit expects a Dataset or a dataset file path")
        out = Path(self.workdir) if self.workdir else Path(tempfile.mkdtemp(
            prefix="hopplan-fit-"))
        tcfg = TrainConfig(steps=self.steps, batch_size=self.batch_size,
                           lr=self.lr, weight_decay=self.weight_decay,
                           warmup_steps=self.warmup_steps, seed=self.seed)
        self.train_result_ = train(data, self._model_config(), tcfg, out)
        self.model_, self.norm_, _, _ = Denoiser.load(self.train_result_.checkpoint)
        return self

    def load(self, checkpoint: str | Path) -> "DiffusionPolicy":
        """Attach a trained checkpoint instead of fitting."""
        self.model_, self.norm_, _, _ = Denoiser.load(checkpoint)
        if self.norm_ is None:
            raise ValueError("checkpoint lacks normalization statistics")
        cfg = self.model_.cfg
        self.set_params(layers=cfg.layers, heads=cfg.heads,
                        embed_dim=cfg.embed_dim, dropout=cfg.dropout,
                        history=cfg.N, horizon=cfg.H, action_horizon=cfg.H_a,
                        levels=cfg.K, emphasis_scale=cfg.emphasis_scale,
                        projection_seed=cfg.projection_seed,
                        attention=cfg.attention, noise_profile=cfg.schedule)
        return self

    def save(self, path: str | Path) -> None:
        check_is_fitted(self)
        self.model_.save(path, norm=self.norm_)

    # -- acting --

    def make_controller(self, scenes: list[Scene] | None = None,
                        specs: list[GuidanceSpec] | None = None,
                        batch: int = 1, seed: int | None = None,
                        **kwargs) -> RollingController:
        check_is_fitted(self)
        scenes = scenes or [Scene() for _ in range(batch)]
        specs = specs or [GuidanceSpec() for _ in range(batch)]
        schedule = make_schedule(self.model_.cfg.K, self.model_.cfg.schedule)
        return RollingController(self.model_, schedule, self.norm_,
                                 self.controller_config(), specs, scenes,
                                 seed=self.seed if seed is None else seed,
                                 **kwargs)

    def reset(self, scene: Scene | None = None,
              spec: GuidanceSpec | None = None) -> None:
        """Start a fresh single-agent rollout for incremental act() calls."""
        self.controller_ = self.make_controller(
            scenes=[scene or Scene()], specs=[spec or GuidanceSpec()])

    def act(self, observation) -> np.ndarray:
        """One control step: observation (6,) -> action (3,)."""
        check_is_fitted(self)
        if getattr(self, "controller_", None) is None:
            self.reset()
        o = check_array(observation, "observation", last_dim=6, ndim=1)
        return self.controller_.advance(o[None]).actions[0]

    def predict(self, X) -> np.ndarray:
        """Autoregressive rollout over a sequence of observations (n, 6).

        Each row is consumed in order by the rolling controller; row i's
        action is what the policy would execute after observing it.
        """
        X = check_array(X, "X", last_dim=6, ndim=2)
        self.reset()
        return np.stack([self.act(row) for row in X])

    @property
    def plan_(self) -> np.ndarray:
        """World-frame root positions of the latest published plan."""
        check_is_fitted(self)
        if getattr(self, "controller_", None) is None:
            raise ValueError("no rollout in progress; call act() first")
        return self.controller_.plans[0]
