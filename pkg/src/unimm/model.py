"""Behavior model: scene encoder plus mixture head, with checkpoint IO."""
from __future__ import annotations

import json

import numpy as np
import torch

from . import nn
from .encoder import Encoder, EncoderConfig
from .mixture import AnchorSet, MixtureConfig, MixtureHead


class BehaviorModel:
    def __init__(self, mixture: MixtureConfig, anchors: AnchorSet | None = None,
                 encoder: EncoderConfig | None = None, seed: int = 0):
        if mixture.paradigm == "anchor_based" and anchors is None:
            raise ValueError("anchor-based models need an AnchorSet")
        if anchors is not None and anchors.K != mixture.K:
            raise ValueError(f"anchor set has K={anchors.K}, config has K={mixture.K}")
        self.cfg = mixture
        self.anchors = anchors
        self.seed = seed
        self.store = nn.ParamStore(seed)
        self.encoder = Encoder(self.store, encoder)
        self.head = MixtureHead(self.store, mixture, self.encoder.cfg.width)

    @property
    def needs_network_plans(self) -> bool:
        """True when realizing a component needs a forward pass (anything but discrete)."""
        return not self.cfg.discrete

    def anchor_local(self, categories, comps, n_steps: int | None = None) -> np.ndarray:
        n = self.cfg.n_pred if n_steps is None else n_steps
        return np.stack([self.anchors.future(c, n)[k] for c, k in zip(categories, comps)])

    def component_trajectories(self, emb) -> np.ndarray:
        """Anchor-free: expected local trajectories of all components, (N, K, n, 3)."""
        with torch.no_grad():
            loc, _, mu, _ = self.head.regress_all(emb)
        return torch.cat([loc, mu.unsqueeze(-1)], dim=-1).numpy()

    def realize(self, emb, categories, comps) -> np.ndarray:
        """Expected local trajectory (N, n, 3) of component ``comps[i]`` for each embedding."""
        comps = np.asarray(comps, dtype=int)
        if self.cfg.paradigm == "anchor_free":
            with torch.no_grad():
                loc, _, mu, _ = self.head.regress_components(emb, comps)
            return torch.cat([loc, mu.unsqueeze(-1)], dim=-1).numpy()
        a = self.anchor_local(categories, comps)
        if not self.cfg.continuous_regression:
            return a
        with torch.no_grad():
            loc, _, mu, _ = self.head.regress_anchor(emb, nn.tensor(a))
        return torch.cat([loc, mu.unsqueeze(-1)], dim=-1).numpy()

    def log_scores(self, emb) -> np.ndarray:
        with torch.no_grad():
            return self.head.log_scores(emb).numpy()

    # -- persistence --

    def hyperparameters(self) -> dict:
        return {"mixture": self.cfg.to_dict(), "encoder": self.encoder.cfg.to_dict(), "seed": self.seed,
                "anchors": None if self.anchors is None else json.loads(self.anchors.to_json())}

    def save(self, path) -> None:
        nn.save_checkpoint(self.store, path, self.hyperparameters())

    @classmethod
    def load(cls, path) -> "BehaviorModel":
        arrays, hp, seed = nn.load_checkpoint(path)
        anchors = None if hp["anchors"] is None else AnchorSet.from_json(json.dumps(hp["anchors"]))
        m = cls(MixtureConfig(**hp["mixture"]), anchors, EncoderConfig(**hp["encoder"]), hp["seed"])
        m.store.load_arrays(arrays)
        return m
