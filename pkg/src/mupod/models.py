"""Trainable models sharing one interface: ``params()``, ``forward(batch)``, checkpoints.

``MupodModel`` is the two-stream model (LSTM encoders feeding the
multi-stream encoder). ``ConcatLstmModel`` and ``SingleTransformerModel``
are the comparison baselines; both consume the per-month concatenation of
medication, diagnosis and demographic vectors.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import Batch, make_batch, pooling_weights
from .data import FORMAT, PatientRecord
from .encoder import AttentionRecord, EncoderConfig, encode_and_predict, init_params
from .representation import LstmParams, encode_stream


def _dump(params: dict[str, Tensor]) -> dict:
    return {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in params.items()}


def _load_into(params: dict[str, Tensor], blob: dict) -> None:
    missing = set(params) ^ set(blob)
    if missing:
        raise ValueError(f"checkpoint parameter names differ: {sorted(missing)}")
    for k, t in params.items():
        shape = tuple(blob[k]["shape"])
        if shape != t.shape:
            raise ValueError(f"checkpoint shape mismatch for {k}: file {shape}, model {t.shape}")
        t.data = np.array(blob[k]["data"], dtype=np.float64).reshape(shape)


def _content_key(batch: Batch, i: int) -> tuple:
    n = int(batch.valid[i].sum())
    return (batch.ids[i], n, hash(batch.meds[i, :n].tobytes()), hash(batch.diags[i, :n].tobytes()))


class Model:
    kind = "model"

    def params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params().items() if t.requires_grad}

    def forward(self, batch: Batch) -> tuple[Tensor, list[AttentionRecord]]:
        raise NotImplementedError

    def manifest(self) -> dict:
        raise NotImplementedError

    def predict_proba(self, records, batch_size: int = 512) -> np.ndarray:
        """Positive-class probability per record, evaluated without a tape."""
        out = []
        records = list(records)
        saved = {k: t.requires_grad for k, t in self.params().items()}
        for t in self.params().values():
            t.requires_grad = False
        try:
            for i in range(0, len(records), batch_size):
                probs, _ = self.forward(make_batch(records[i : i + batch_size]))
                out.append(probs.data[:, 1])
        finally:
            for k, t in self.params().items():
                t.requires_grad = saved[k]
        return np.concatenate(out) if out else np.zeros(0)

    def to_json(self) -> dict:
        return {"format": FORMAT, "kind": self.kind, "manifest": self.manifest(), "params": _dump(self.params())}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")


class MupodModel(Model):
    """Per-stream LSTM encoders -> multi-stream encoder -> prediction."""

    kind = "mupod"

    def __init__(
        self,
        med_encoder: LstmParams,
        diag_encoder: LstmParams,
        config: EncoderConfig | None = None,
        seed: int = 0,
        finetune: bool = False,
    ):
        self.config = config or EncoderConfig(stream_dim=med_encoder.hidden_dim)
        if med_encoder.hidden_dim != self.config.stream_dim or diag_encoder.hidden_dim != self.config.stream_dim:
            raise ValueError("encoder hidden width must equal the stream width")
        self.med_encoder = med_encoder
        self.diag_encoder = diag_encoder
        self.encoder_params = init_params(self.config, seed)
        self.seed = seed
        self.finetune = finetune
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        med_encoder.freeze(not finetune)
        diag_encoder.freeze(not finetune)

    def params(self):
        return {**self.med_encoder.named("enc_M."), **self.diag_encoder.named("enc_D."), **self.encoder_params}

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor]:
        if self.finetune:
            return encode_stream(batch.meds, self.med_encoder), encode_stream(batch.diags, self.diag_encoder)
        # frozen encoders: each patient is encoded once and reused
        keys = [_content_key(batch, i) for i in range(batch.size)]
        todo = [i for i, k in enumerate(keys) if k not in self._cache]
        if todo:
            hm = encode_stream(batch.meds[todo], self.med_encoder).data
            hd = encode_stream(batch.diags[todo], self.diag_encoder).data
            for j, i in enumerate(todo):
                n = int(batch.valid[i].sum())
                self._cache[keys[i]] = (hm[j, :n].copy(), hd[j, :n].copy())
        B, T = batch.valid.shape
        H = self.config.stream_dim
        hm = np.zeros((B, T, H))
        hd = np.zeros((B, T, H))
        for i, k in enumerate(keys):
            m, d = self._cache[k]
            hm[i, : len(m)] = m
            hd[i, : len(d)] = d
        return Tensor(hm), Tensor(hd)

    def clear_cache(self) -> None:
        self._cache.clear()

    def forward(self, batch: Batch):
        hm, hd = self.encode(batch)
        return encode_and_predict([hm, hd], batch.demo, batch.valid, self.encoder_params, self.config)

    def manifest(self) -> dict:
        return {
            "encoder": self.config.to_dict(),
            "med_input_dim": self.med_encoder.input_dim,
            "diag_input_dim": self.diag_encoder.input_dim,
            "hidden_dim": self.med_encoder.hidden_dim,
            "finetune": self.finetune,
            "seed": self.seed,
        }

    @classmethod
    def build(cls, manifest: dict) -> "MupodModel":
        cfg = EncoderConfig(**manifest["encoder"])
        m = LstmParams.init(manifest["med_input_dim"], manifest["hidden_dim"])
        d = LstmParams.init(manifest["diag_input_dim"], manifest["hidden_dim"])
        return cls(m, d, cfg, manifest["seed"], manifest["finetune"])


class ConcatLstmModel(Model):
    """One LSTM over [meds | diags | demo] per month, linear head on the last valid state."""

    kind = "concat-lstm"

    def __init__(self, input_dim: int, hidden_dim: int = 32, seed: int = 0):
        self.lstm = LstmParams.init(input_dim, hidden_dim, seed)
        rng = np.random.default_rng(seed + 1)
        self.W = Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden_dim), (hidden_dim, 2)), True)
        self.b = Tensor(np.zeros((1, 2)), True)
        self.seed = seed

    def params(self):
        return {**self.lstm.named("lstm."), "head.W": self.W, "head.b": self.b}

    def forward(self, batch: Batch):
        H = encode_stream(batch.concatenated(), self.lstm)
        last = ad.flatten_batch(ad.matmul(Tensor(pooling_weights(batch.valid, "last")), H))
        return ad.softmax_rows(ad.add(ad.matmul(last, self.W), self.b)), []

    def manifest(self) -> dict:
        return {"input_dim": self.lstm.input_dim, "hidden_dim": self.lstm.hidden_dim, "seed": self.seed}

    @classmethod
    def build(cls, manifest: dict) -> "ConcatLstmModel":
        return cls(manifest["input_dim"], manifest["hidden_dim"], manifest["seed"])


class SingleTransformerModel(Model):
    """Linear embedding of the concatenated month, then a one-stream encoder.

    Each layer is plain self-attention ``cross_attention(X, X, X)`` followed by
    the same reconstruction, pooling and prediction head as the multi-stream
    model.
    """

    kind = "single-transformer"

    def __init__(self, input_dim: int, config: EncoderConfig | None = None, seed: int = 0):
        self.config = config or EncoderConfig(stream_names=("X",), stream_dim=20, d_k=20)
        if len(self.config.stream_names) != 1:
            raise ValueError("single-stream transformer takes exactly one stream")
        rng = np.random.default_rng(seed + 7)
        d = self.config.stream_dim
        self.embed_W = Tensor(rng.normal(0.0, 1.0 / math.sqrt(input_dim), (input_dim, d)), True)
        self.embed_b = Tensor(np.zeros((1, d)), True)
        self.encoder_params = init_params(self.config, seed)
        self.input_dim = input_dim
        self.seed = seed

    def params(self):
        return {"embed.W": self.embed_W, "embed.b": self.embed_b, **self.encoder_params}

    def embed(self, batch: Batch) -> Tensor:
        return ad.add(ad.matmul(Tensor(batch.concatenated()), self.embed_W), self.embed_b)

    def forward(self, batch: Batch):
        return encode_and_predict([self.embed(batch)], batch.demo, batch.valid, self.encoder_params, self.config)

    def manifest(self) -> dict:
        return {"encoder": self.config.to_dict(), "input_dim": self.input_dim, "seed": self.seed}

    @classmethod
    def build(cls, manifest: dict) -> "SingleTransformerModel":
        return cls(manifest["input_dim"], EncoderConfig(**manifest["encoder"]), manifest["seed"])


MODEL_KINDS = {c.kind: c for c in (MupodModel, ConcatLstmModel, SingleTransformerModel)}


def load_model(path) -> Model:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != FORMAT or obj.get("kind") not in MODEL_KINDS:
        raise ValueError(f"{path}: not a mupod-v1 model checkpoint")
    model = MODEL_KINDS[obj["kind"]].build(obj["manifest"])
    _load_into(model.params(), obj["params"])
    if isinstance(model, MupodModel):
        model.med_encoder.freeze(not model.finetune)
        model.diag_encoder.freeze(not model.finetune)
    return model


def forward(p: PatientRecord, model: Model) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Single-patient inference: 1 x 2 probabilities and per-layer T x T attention records."""
    if p.T < 1:
        raise ValueError(f"patient {p.id} has no time steps")
    probs, trace = model.forward(make_batch([p]))
    records = [AttentionRecord(r.layer, r.pair, r.att[0], r.output[0]) for r in trace]
    return probs.data, records
