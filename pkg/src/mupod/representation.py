"""Per-stream LSTM encoders that turn multi-hot months into 10-wide vectors."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import Batch, make_batch, pooling_weights
from .data import FORMAT, EnrolleeTimeMatrix
from .optim import make_optimizer

log = logging.getLogger(__name__)

GATES = ("i", "f", "o", "g")


class DivergenceError(RuntimeError):
    pass


@dataclass
class LstmParams:
    input_dim: int
    hidden_dim: int
    W: dict[str, Tensor]  # (input_dim + hidden_dim) x hidden_dim per gate
    b: dict[str, Tensor]  # 1 x hidden_dim per gate

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int = 10, seed: int = 0, requires_grad: bool = True):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(hidden_dim)
        W = {
            g: Tensor(rng.uniform(-bound, bound, (input_dim + hidden_dim, hidden_dim)), requires_grad)
            for g in GATES
        }
        b = {g: Tensor(np.zeros((1, hidden_dim)), requires_grad) for g in GATES}
        b["f"].data[:] = 1.0
        return cls(input_dim, hidden_dim, W, b)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for g in GATES:
            out[f"{prefix}W_{g}"] = self.W[g]
            out[f"{prefix}b_{g}"] = self.b[g]
        return out

    def freeze(self, frozen: bool = True) -> None:
        for t in self.named().values():
            t.requires_grad = not frozen

    def copy(self) -> "LstmParams":
        return LstmParams(
            self.input_dim,
            self.hidden_dim,
            {g: Tensor(t.data.copy(), t.requires_grad) for g, t in self.W.items()},
            {g: Tensor(t.data.copy(), t.requires_grad) for g, t in self.b.items()},
        )

    def to_json(self) -> dict:
        return {
            "format": FORMAT,
            "kind": "lstm-encoder",
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "params": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for k, t in self.named().items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LstmParams":
        if obj.get("format") != FORMAT or obj.get("kind") != "lstm-encoder":
            raise ValueError("not a mupod-v1 lstm-encoder checkpoint")
        p = obj["params"]
        load = lambda k: Tensor(np.array(p[k]["data"]).reshape(p[k]["shape"]))
        return cls(
            obj["input_dim"],
            obj["hidden_dim"],
            {g: load(f"W_{g}") for g in GATES},
            {g: load(f"b_{g}") for g in GATES},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "LstmParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def lstm_step(x: Tensor, h: Tensor, c: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One cell update: gates from [x, h], then c' = f*c + i*g and h' = o*tanh(c')."""
    if x.cols != params.input_dim or h.cols != params.hidden_dim or c.shape != h.shape:
        raise ad.DimensionError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} vs input {params.input_dim}, hidden {params.hidden_dim}"
        )
    xh = ad.concat_cols([x, h])
    pre = {g: ad.add(ad.matmul(xh, params.W[g]), params.b[g]) for g in GATES}
    i, f, o = (ad.sigmoid(pre[g]) for g in "ifo")
    g = ad.tanh(pre["g"])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def encode_stream(stream, params: LstmParams) -> Tensor:
    """Hidden state at every step from a zero start; ``stream`` is T x in or B x T x in."""
    x = stream if isinstance(stream, Tensor) else Tensor(stream)
    if x.cols != params.input_dim:
        raise ad.DimensionError(f"encode_stream: input width {x.cols} != {params.input_dim}")
    T, H, n_in = x.rows, params.hidden_dim, params.input_dim
    lead = x.shape[:-2]
    # input projections for all steps at once; only the recurrent part loops
    W = ad.concat_cols([params.W[g] for g in GATES])
    bias = ad.concat_cols([params.b[g] for g in GATES])
    Wx = _slice_rows(W, 0, n_in)
    Wh = _slice_rows(W, n_in, n_in + H)
    xw = ad.add(ad.matmul(x, Wx), bias)
    h = Tensor(np.zeros(lead + (1, H)))
    c = h
    outs = []
    for t in range(T):
        z = ad.add(ad.row(xw, t), ad.matmul(h, Wh))
        i = ad.sigmoid(ad.slice_cols(z, 0, H))
        f = ad.sigmoid(ad.slice_cols(z, H, 2 * H))
        o = ad.sigmoid(ad.slice_cols(z, 2 * H, 3 * H))
        g = ad.tanh(ad.slice_cols(z, 3 * H, 4 * H))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return ad.stack_rows(outs)


def _slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    return ad.transpose(ad.slice_cols(ad.transpose(a), lo, hi))


# ------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    hidden_dim: int = 10
    lr: float = 1e-2
    batch_size: int = 64
    iterations: int = 300
    l2: float = 1e-6
    eval_every: int = 50
    optimizer: str = "adam"
    seed: int = 0


class LstmHead:
    """LSTM over one stream plus a linear softmax head on the last valid hidden state."""

    def __init__(self, lstm: LstmParams, seed: int = 0):
        rng = np.random.default_rng(seed + 1)
        self.lstm = lstm
        self.W = Tensor(rng.normal(0.0, 1.0 / math.sqrt(lstm.hidden_dim), (lstm.hidden_dim, 2)), True)
        self.b = Tensor(np.zeros((1, 2)), True)

    def params(self) -> dict[str, Tensor]:
        return {**self.lstm.named("lstm."), "head.W": self.W, "head.b": self.b}

    def forward(self, x: np.ndarray, valid: np.ndarray) -> Tensor:
        H = encode_stream(x, self.lstm)
        last = ad.flatten_batch(ad.matmul(Tensor(pooling_weights(valid, "last")), H))
        return ad.softmax_rows(ad.add(ad.matmul(last, self.W), self.b))


def stream_of(batch: Batch, stream: str) -> np.ndarray:
    if stream == "med":
        return batch.meds
    if stream == "diag":
        return batch.diags
    if stream == "concat":
        return batch.concatenated()
    raise ValueError(f"unknown stream {stream!r}")


def pretrain_encoder(
    train: EnrolleeTimeMatrix,
    val: EnrolleeTimeMatrix,
    stream: str,
    config: PretrainConfig = PretrainConfig(),
) -> tuple[LstmParams, list[dict]]:
    """Fit an LSTM + head on the label from one stream; return the encoder and the log."""
    from .evaluation import auc

    input_dim = train.med_vocab_size if stream == "med" else train.diag_vocab_size
    model = LstmHead(LstmParams.init(input_dim, config.hidden_dim, config.seed), config.seed)
    params = model.params()
    history: list[dict] = []
    if config.iterations == 0:
        return model.lstm, history
    opt = make_optimizer(config.optimizer, params, config.lr, config.l2)
    rng = np.random.default_rng(config.seed)
    vb = make_batch(val.patients)
    vx = stream_of(vb, stream)

    def evaluate(it, train_loss):
        probs = model.forward(vx, vb.valid)
        loss = ad.cross_entropy(probs, vb.labels).item()
        score = auc(probs.data[:, 1], vb.labels) if len(set(vb.labels.tolist())) == 2 else float("nan")
        history.append({"iteration": it, "train_loss": train_loss, "val_loss": loss, "val_auc": score})
        return loss

    best = (evaluate(0, float("nan")), model.lstm.copy())
    n = len(train)
    order = rng.permutation(n)
    pos = 0
    for it in range(1, config.iterations + 1):
        if pos + config.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        b = make_batch([train.patients[i] for i in idx])
        opt.zero_grad()
        loss = ad.cross_entropy(model.forward(stream_of(b, stream), b.valid), b.labels)
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"pretraining loss became {loss.item()} at iteration {it}; lower the learning rate")
        ad.backward(loss)
        opt.step()
        if it % config.eval_every == 0 or it == config.iterations:
            v = evaluate(it, loss.item())
            if v < best[0]:
                best = (v, model.lstm.copy())
    enc = best[1]
    enc.freeze(False)
    return enc, history
