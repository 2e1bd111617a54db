"""scikit-learn style estimators around the pipeline.

* :class:`ToyReidExtractor`: small CNN embedding trained with an identity
  classification loss; ``transform`` returns L2-normalized features.
* :class:`PixelFeatureExtractor`: flattened pixels, for metric testing.
* :class:`ModalityClassifier`: logistic regression telling visible from
  infrared images.
* :class:`DiveGenerator`: fine-tunes identity tokens and adapters on a
  frozen base and generates images for ``(identity, view)`` prompts.

Image inputs are arrays of shape ``(N, 3, H, W)`` in ``[-1, 1]``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Modality

__all__ = ["ToyReidExtractor", "PixelFeatureExtractor", "ModalityClassifier", "DiveGenerator",
           "check_images"]


def check_images(X) -> np.ndarray:
    X = check_array(np.asarray(X), allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {X.shape}")
    return X


class PixelFeatureExtractor(TransformerMixin, BaseEstimator):
    """Flattened pixels; ``fit`` only records the input shape."""

    def fit(self, X, y=None):
        X = check_images(X)
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "input_shape_")
        X = check_images(X)
        if X.shape[1:] != self.input_shape_:
            raise ValueError("image shape differs from the fitted shape")
        return X.reshape(len(X), -1).astype(np.float64)


class _EmbedNet(nn.Module):
    def __init__(self, dim: int, n_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 96, 3, padding=1), nn.BatchNorm2d(96), nn.ReLU(),
            nn.AdaptiveAvgPool2d((2, 1)),
        )
        self.proj = nn.Linear(192, dim)
        self.head = nn.Linear(dim, n_classes)

    def embed(self, x):
        return self.proj(self.body(x).flatten(1))

    def forward(self, x):
        return self.head(F.normalize(self.embed(x), dim=1) * 16.0)


class ToyReidExtractor(TransformerMixin, BaseEstimator):
    """Identity embedding network for the toy corpus.

    Trained with a scaled cosine softmax over identity labels, so that
    Euclidean distance between normalized features ranks identities.
    ``fit`` accepts images of both modalities.
    """

    def __init__(self, embed_dim: int = 64, steps: int = 1500, batch_size: int = 64,
                 learning_rate: float = 3e-3, horizontal_flip: bool = True, seed: int = 0):
        self.embed_dim = embed_dim
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.horizontal_flip = horizontal_flip
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError("y must have one label per image")
        self.classes_, codes = np.unique(y, return_inverse=True)
        torch.manual_seed(self.seed)
        net = _EmbedNet(self.embed_dim, len(self.classes_))
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        lr_s = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(self.steps, 1))
        Xt, yt = torch.from_numpy(X), torch.from_numpy(codes.astype(np.int64))
        rng = np.random.default_rng(self.seed)
        net.train()
        for _ in range(self.steps):
            idx = torch.from_numpy(rng.integers(len(X), size=self.batch_size))
            xb = Xt[idx]
            if self.horizontal_flip:
                flip = torch.from_numpy(rng.random(self.batch_size) < 0.5)
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
            loss = F.cross_entropy(net(xb), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            lr_s.step()
        net.eval()
        self.net_ = net
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        with torch.no_grad():
            feats = []
            for start in range(0, len(X), 256):
                feats.append(self.net_.embed(torch.from_numpy(X[start:start + 256])))
        if not feats:
            return np.zeros((0, self.embed_dim))
        # normalize after the cast so unit norm holds to float64 precision
        out = torch.cat(feats).numpy().astype(np.float64)
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def modality_features(X: np.ndarray, pool=(8, 4)) -> np.ndarray:
    """Pooled luminance plus per-pixel channel spread statistics."""
    X = np.asarray(X, dtype=np.float64)
    N, _, H, W = X.shape
    lum = X.mean(1)
    ph, pw = pool
    pooled = torch.nn.functional.adaptive_avg_pool2d(torch.from_numpy(lum)[:, None],
                                                     (ph, pw)).numpy().reshape(N, -1)
    spread = X.std(1)
    stats = np.stack([spread.mean((1, 2)), spread.max((1, 2)),
                      np.abs(X[:, 0] - X[:, 1]).mean((1, 2)),
                      np.abs(X[:, 1] - X[:, 2]).mean((1, 2)),
                      lum.mean((1, 2)), lum.std((1, 2))], 1)
    return np.hstack([pooled, stats])


class ModalityClassifier(ClassifierMixin, BaseEstimator):
    """Visible-versus-infrared classifier on hand-made image statistics."""

    def __init__(self, C: float = 1.0, max_iter: int = 2000):
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray([Modality(v).value for v in y])
        self.model_ = make_pipeline(StandardScaler(),
                                    LogisticRegression(C=self.C, max_iter=self.max_iter))
        self.model_.fit(modality_features(X), y)
        self.classes_ = self.model_.classes_
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(modality_features(check_images(X)))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(modality_features(check_images(X)))

    def infrared_rate(self, X) -> float:
        return float(np.mean(self.predict(X) == Modality.INFRARED.value))


class DiveGenerator(BaseEstimator):
    """Fine-tune identity tokens and LoRA adapters, then generate.

    ``fit(corpora, image_root=..., base=...)`` takes a sequence of
    :class:`~dive.data.ReidCorpus` (the VI corpus first, then the external
    visible corpus) and a pretrained :class:`~dive.training.BaseModel`.
    ``predict(cells)`` maps ``(namespace, identity, view_token_surface)``
    triples to images.
    """

    def __init__(self, learning_rate: float = 1e-3, batch_size: int = 16,
                 total_steps: int = 2000, lora_rank: int = 32, lora_scale: float = 1.0,
                 view_granularity: str = "camera", horizontal_flip: bool = True,
                 image_size=(32, 16), sampler_steps: int = 25, seed: int = 0):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.lora_rank = lora_rank
        self.lora_scale = lora_scale
        self.view_granularity = view_granularity
        self.horizontal_flip = horizontal_flip
        self.image_size = image_size
        self.sampler_steps = sampler_steps
        self.seed = seed

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           total_steps=self.total_steps, image_size=tuple(self.image_size),
                           horizontal_flip=self.horizontal_flip, seed=self.seed,
                           checkpoint_every=max(self.total_steps, 1), lora_rank=self.lora_rank,
                           lora_scale=self.lora_scale, view_granularity=self.view_granularity)

    def fit(self, corpora, y=None, *, base, image_root=None):
        import copy

        from .training import build_training_set, prepare_finetune, train

        if len(corpora) != 2:
            raise ValueError("fit expects (vi_corpus, external_corpus)")
        cfg = self.train_config()
        base = copy.deepcopy(base)
        model, adapters = prepare_finetune(base, corpora, cfg)
        examples = build_training_set(corpora[0], corpora[1], base.registry, cfg.view_granularity)
        trainer = train(cfg, examples, model, adapters, base.registry, base.encoder, base.sched,
                        image_root=image_root)
        self.model_, self.adapters_ = model, adapters
        self.registry_, self.encoder_, self.sched_ = base.registry, base.encoder, base.sched
        self.loss_curve_ = trainer.loss_curve
        return self

    def view_token(self, dataset_id: str, modality, camera_id: int | None):
        from .training import COARSE_DATASET

        check_is_fitted(self, "model_")
        if self.view_granularity == "modality":
            return self.registry_.view(modality, None, COARSE_DATASET)
        return self.registry_.view(modality, camera_id, dataset_id)

    def predict(self, cells, n_per_cell: int = 1, seed: int | None = None) -> np.ndarray:
        """Images for each ``(namespace, identity, view_surface)`` cell,
        shape ``(len(cells) * n_per_cell, 3, H, W)``."""
        from .prompts import PromptSpec
        from .sampling import SamplerConfig, initial_noise, sample

        check_is_fitted(self, "model_")
        seed = self.seed if seed is None else seed
        out = []
        H, W = self.image_size
        for i, (ns, identity, view) in enumerate(cells):
            spec = PromptSpec(self.registry_.identity(identity, ns), self.registry_.token(view))
            noise = initial_noise((n_per_cell, 3, H, W), seed * 1_000_003 + i)
            imgs = sample(spec, SamplerConfig(self.sampler_steps, batch=n_per_cell), self.model_,
                          self.registry_, self.encoder_, self.sched_, self.adapters_,
                          (H, W), noise=noise)
            out.append(imgs.numpy())
        return np.concatenate(out) if out else np.zeros((0, 3, H, W), np.float32)

    def save(self, path):
        from .diffusion import save_checkpoint

        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, self.registry_, self.encoder_, self.sched_,
                               self.adapters_, extra={"params": self.get_params()})
