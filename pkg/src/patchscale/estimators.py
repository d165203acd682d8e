"""scikit-learn wrappers around the encoder for classification and segmentation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .model import SegHeadConfig, build_encoder, build_segmenter, get_preset
from .tensor_core import no_grad
from .train import confusion_counts, get_recipe, mean_iou, predict_logits, train_run
from .validation import check_images, check_masks, check_patch_divides


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _EncoderParams(BaseEstimator):
    def _encoder_config(self, size: int, channels: int, num_classes: int):
        check_patch_divides(size, size, self.patch)
        over = dict(image_size=size, patch=self.patch, channels=channels, num_classes=num_classes)
        for k in ("embed_dim", "mlp_dim", "depth"):
            if getattr(self, k) is not None:
                over[k] = getattr(self, k)
        return get_preset(self.preset, **over)

    def _recipe(self):
        over = {"seed": self.random_state}
        for k, name in (("epochs", "epochs"), ("learning_rate", "base_lr"), ("batch_size", "batch_size")):
            if getattr(self, k) is not None:
                over[name] = getattr(self, k)
        r = get_recipe(self.recipe, **over)
        if r.warmup_epochs > r.epochs:
            r = get_recipe(self.recipe, warmup_epochs=r.epochs, **over)
        return r


class PatchEncoderClassifier(ClassifierMixin, TransformerMixin, _EncoderParams):
    """Image classifier; ``transform`` returns the final CLS features.

    X is [N, C, H, W] with values in [0, 1].
    """

    def __init__(self, preset="desk_scan", patch=4, embed_dim=None, mlp_dim=None, depth=None,
                 recipe="desk", epochs=None, learning_rate=None, batch_size=None, random_state=0):
        self.preset = preset
        self.patch = patch
        self.embed_dim = embed_dim
        self.mlp_dim = mlp_dim
        self.depth = depth
        self.recipe = recipe
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        self.label_encoder_ = LabelEncoder().fit(y)
        yi = self.label_encoder_.transform(np.asarray(y))
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = self._encoder_config(X.shape[-1], X.shape[1], len(self.classes_))
        self.model_ = build_encoder(cfg, seed=self.random_state)
        ds = Dataset(X.astype(np.float32), yi, num_classes=len(self.classes_))
        self.log_ = train_run(self.model_, ds, self._recipe(), record_wall_time=False).log
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        return check_images(X, cfg.channels, cfg.image_size).astype(np.float32)

    def decision_function(self, X):
        X = self._checked(X)
        return predict_logits(self.model_, X).astype(np.float64)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        X = self._checked(X)
        m = self.model_
        m.eval()
        with no_grad():
            feats = [m.forward_features(X[i:i + 64]).data[:, m.cfg.cls_index] for i in range(0, len(X), 64)]
        return np.concatenate(feats).astype(np.float64)


class PatchEncoderSegmenter(_EncoderParams):
    """Per-pixel classifier; ``head`` is ``linear`` or ``conv_decoder_proxy``.  ``score`` is mIoU."""

    def __init__(self, preset="desk_scan", patch=4, head="linear", decoder_dim=32, decoder_stages=2,
                 embed_dim=None, mlp_dim=None, depth=None, recipe="desk", epochs=None,
                 learning_rate=None, batch_size=None, random_state=0):
        self.preset = preset
        self.patch = patch
        self.head = head
        self.decoder_dim = decoder_dim
        self.decoder_stages = decoder_stages
        self.embed_dim = embed_dim
        self.mlp_dim = mlp_dim
        self.depth = depth
        self.recipe = recipe
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, masks, num_classes=None):
        X = check_images(X)
        masks = check_masks(masks, X.shape)
        K = num_classes or int(masks.max()) + 1
        self.num_classes_ = K
        cfg = self._encoder_config(X.shape[-1], X.shape[1], 0)
        head = SegHeadConfig(self.head, K, self.decoder_dim, self.decoder_stages)
        self.model_ = build_segmenter(cfg, head, seed=self.random_state)
        ds = Dataset(X.astype(np.float32), None, masks, num_classes=K)
        self.log_ = train_run(self.model_, ds, self._recipe(), record_wall_time=False).log
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        X = check_images(X, cfg.channels, cfg.image_size).astype(np.float32)
        return _softmax(predict_logits(self.model_, X).astype(np.float64), axis=1)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, masks):
        pred = self.predict(X)
        masks = check_masks(masks, (len(pred), 1) + pred.shape[1:], self.num_classes_)
        return mean_iou(confusion_counts(pred, masks, self.num_classes_))
