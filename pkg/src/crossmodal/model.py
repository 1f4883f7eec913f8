"""Video classifiers: one backbone (rnn / transformer / netvlad) times one fusion variant.

E runs a single tower over per-frame concatenated inputs.  L runs one tower
per modality and joins the pooled embeddings in the head.  CM-G and CM-C
add the cross-modal transforms between the two towers: CM-G scales them by
the thresholded correlation prediction, CM-C by the raw prediction and
additionally appends the tower's correlation features to every valid frame
of both modalities.

Sub-modules are named identically across variants (``tower.video``,
``head`` ...), so with one seed L and CM-G start from the same weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .config import ExperimentConfig
from .errors import ConfigError, DimensionError
from .layers import FusionVariant, ParamStore


class Classifier:
    def __init__(self, config: ExperimentConfig, video_dim: int, audio_dim: int, num_labels: int,
                 frames: int, corr_dim: int = 0, seed: int = 0):
        self.config = config
        self.variant = FusionVariant(config.variant)
        self.backbone = config.backbone
        self.video_dim, self.audio_dim = int(video_dim), int(audio_dim)
        self.num_labels, self.frames = int(num_labels), int(frames)
        self.corr_dim = int(corr_dim) if self.variant is FusionVariant.CROSS_MODAL_CONCAT else 0
        if self.variant is FusionVariant.CROSS_MODAL_CONCAT and self.corr_dim < 1:
            raise ConfigError("CM-C needs the correlation feature width")
        self.seed = int(seed)
        self.store = ParamStore(seed)
        self.F_v = self.F_a = None
        dv, da = self.video_dim + self.corr_dim, self.audio_dim + self.corr_dim
        build = {"rnn": self._build_rnn, "transformer": self._build_transformer, "netvlad": self._build_netvlad}
        if self.backbone not in build:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        embed = build[self.backbone](dv, da)
        self.head = L.HeadParams.create(self.store, "head", embed, config.head_hidden, self.num_labels)

    # -- construction -----------------------------------------------------------------

    @property
    def joint(self) -> bool:
        return self.variant is FusionVariant.EARLY

    def _build_rnn(self, dv, da) -> int:
        H = self.config.rnn_hidden
        if self.joint:
            self.tower = L.RnnParams.create(self.store, "tower.joint", dv + da, H)
            return H
        self.tower = L.RnnTowerParams(
            L.RnnParams.create(self.store, "tower.video", dv, H),
            L.RnnParams.create(self.store, "tower.audio", da, H),
        )
        if self.variant.cross_modal:
            T = self.frames
            self.F_v = L.CrossModalTransform.create(self.store, "xmodal.F_v", T, T)
            self.F_a = L.CrossModalTransform.create(self.store, "xmodal.F_a", T, T)
        return 2 * H

    def _build_transformer(self, dv, da) -> int:
        c = self.config
        dm = c.heads * c.head_dim
        if self.joint:
            self.tower = L.AttentionParams.create(self.store, "tower.joint", dv + da, c.heads, c.head_dim)
            return dm
        self.tower = L.TransformerLayerParams(
            L.AttentionParams.create(self.store, "tower.video", dv, c.heads, c.head_dim),
            L.AttentionParams.create(self.store, "tower.audio", da, c.heads, c.head_dim),
        )
        if self.variant.cross_modal:
            self.F_v = L.CrossModalTransform.per_head(self.store, "xmodal.F_v", c.heads)
            self.F_a = L.CrossModalTransform.per_head(self.store, "xmodal.F_a", c.heads)
        return 2 * dm

    def _build_netvlad(self, dv, da) -> int:
        Kv, Ka = self.config.clusters_video, self.config.clusters_audio
        if self.joint:
            self.tower = L.VladParams.create(self.store, "tower.joint", dv + da, Kv)
            return Kv * (dv + da)
        self.tower = L.NetVladParams(
            L.VladParams.create(self.store, "tower.video", dv, Kv),
            L.VladParams.create(self.store, "tower.audio", da, Ka),
        )
        if self.variant.cross_modal:
            self.F_v = L.CrossModalTransform.create(self.store, "xmodal.F_v", Kv, Ka)
            self.F_a = L.CrossModalTransform.create(self.store, "xmodal.F_a", Ka, Kv)
        return Kv * dv + Ka * da

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def arch(self) -> dict:
        return {
            **self.config.arch_dict(),
            "video_dim": self.video_dim,
            "audio_dim": self.audio_dim,
            "num_labels": self.num_labels,
            "frames": self.frames,
            "corr_dim": self.corr_dim,
        }

    # -- forward ----------------------------------------------------------------------------

    def _inputs(self, video, audio, mask, corr_feat):
        video = np.asarray(video, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if video.ndim != 3 or audio.ndim != 3:
            raise DimensionError("classifier expects batched [B, T, D] inputs")
        if video.shape[2] != self.video_dim or audio.shape[2] != self.audio_dim:
            raise ConfigError(
                f"model built for video/audio widths {self.video_dim}/{self.audio_dim}, "
                f"got {video.shape[2]}/{audio.shape[2]}"
            )
        if self.backbone == "rnn" and self.variant.cross_modal and video.shape[1] != self.frames:
            raise ConfigError(f"model built for {self.frames} frames, got {video.shape[1]}")
        if self.corr_dim:
            if corr_feat is None:
                raise ConfigError("CM-C forward needs correlation features")
            feat = np.asarray(corr_feat, dtype=np.float64)
            if feat.shape != (video.shape[0], self.corr_dim):
                raise DimensionError(f"correlation features {feat.shape}, expected ({video.shape[0]}, {self.corr_dim})")
            B, T = video.shape[:2]
            tiled = np.broadcast_to(feat[:, None, :], (B, T, self.corr_dim)) * mask[:, :, None]
            video = np.concatenate([video, tiled], axis=2)
            audio = np.concatenate([audio, tiled], axis=2)
        return Tensor(video), Tensor(audio)

    def logits(self, video, audio, mask, gate=None, corr_feat=None) -> Tensor:
        """Per-label logits [B, num_labels].

        ``gate`` (per example) is required by the cross-modal variants;
        ``corr_feat`` ([B, corr_dim]) by CM-C.
        """
        mask = np.asarray(mask, dtype=np.float64)
        X_v, X_a = self._inputs(video, audio, mask, corr_feat)
        if self.variant.cross_modal and gate is None:
            raise ConfigError(f"variant {self.variant.value} needs a gate value per example")
        F_v, F_a = self.F_v, self.F_a
        g = 1.0 if gate is None else gate
        if self.backbone == "rnn":
            if self.joint:
                return L.late_fusion_head(L.attention_rnn(L.early_fusion(X_v, X_a), self.tower, mask), None, self.head)
            c_v, c_a = L.cross_modal_rnn(X_v, X_a, self.tower, F_v, F_a, g, mask)
            return L.late_fusion_head(c_v, c_a, self.head)
        if self.backbone == "transformer":
            if self.joint:
                Y = L.multihead_self_attention(L.early_fusion(X_v, X_a), self.tower, mask)
                return L.late_fusion_head(L.masked_mean(Y, mask), None, self.head)
            Y_v, Y_a = L.cross_modal_transformer_layer(X_v, X_a, self.tower, F_v, F_a, g, mask)
            return L.late_fusion_head(L.masked_mean(Y_v, mask), L.masked_mean(Y_a, mask), self.head)
        if self.joint:
            V = L.netvlad(L.early_fusion(X_v, X_a), self.tower, mask)
            return L.late_fusion_head(L.vlad_descriptor(V), None, self.head)
        V_v, V_a = L.cross_modal_netvlad(X_v, X_a, self.tower, F_v, F_a, g, mask)
        return L.late_fusion_head(L.vlad_descriptor(V_v), L.vlad_descriptor(V_a), self.head)

    def loss(self, batch: dict, gate=None, corr_feat=None) -> Tensor:
        logits = self.logits(batch["video"], batch["audio"], batch["mask"], gate, corr_feat)
        return ad.bce_with_logits(logits, batch["targets"])

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.shape != arr.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape}, model {p.shape}")
            p.data[...] = arr
