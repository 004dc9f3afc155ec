"""Wireless hop: PSNR-parameterized AWGN / Rayleigh fading, power normalization,
and the compact linear channel codec (encoder 128->16, decoder 16/128/16 with a
residual layer norm).

The channel is non-trainable: during backprop additive noise contributes no
gradient, and a Rayleigh fade scales the upstream gradient by the drawn gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, TocError

CHANNEL_KINDS = ("awgn", "rayleigh", "noiseless")

# Table-style codec widths: hidden layer and transmitted dimension.
CODEC_HIDDEN = 128
TX_DIM = 16


def noise_var_from_psnr(psnr_db: float, signal_power: float = 1.0) -> float:
    """Noise variance for a target PSNR: sigma^2 = P * 10^(-PSNR/10)."""
    if signal_power <= 0:
        raise TocError(f"signal power must be positive, got {signal_power}")
    return signal_power * 10.0 ** (-psnr_db / 10.0)


@dataclass(frozen=True)
class ChannelSpec:
    """Channel kind plus its PSNR operating point.

    Signal power is pinned to 1 by the per-sample power normalization placed
    after the channel encoder, so the PSNR fully determines the noise variance.
    """

    kind: str = "awgn"
    psnr_db: float = 0.0
    signal_power: float = 1.0

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise TocError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        if self.signal_power <= 0:
            raise TocError(f"signal power must be positive, got {self.signal_power}")

    @property
    def noise_var(self) -> float:
        if self.kind == "noiseless":
            return 0.0
        return noise_var_from_psnr(self.psnr_db, self.signal_power)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "psnr_db": self.psnr_db}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelSpec":
        return cls(kind=d.get("kind", "awgn"), psnr_db=float(d.get("psnr_db", 0.0)))


def normalize_power(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit mean square. All-zero rows have undefined power."""
    x = np.asarray(x, dtype=float)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    if np.any(ms == 0.0):
        raise TocError("power normalization undefined for an all-zero vector")
    return x / np.sqrt(ms)


def rayleigh_gain(rng: np.random.Generator, n: int) -> np.ndarray:
    """Per-sample scalar fade with unit second moment: h = sqrt(g1^2+g2^2)/sqrt(2)."""
    g = rng.standard_normal((n, 2))
    return np.sqrt((g * g).sum(axis=1) / 2.0)


def transmit(x: np.ndarray, spec: ChannelSpec, rng: np.random.Generator | None):
    """Push a power-normalized batch through the channel.

    Returns (y, gain) where gain is the per-sample fade (None for AWGN and
    noiseless kinds). Pure function of (x, spec, rng state).
    """
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("channel input contains NaN/Inf")
    if spec.kind == "noiseless":
        return x.copy(), None
    if rng is None:
        raise TocError(f"{spec.kind} channel requires a random source")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    sigma = np.sqrt(spec.noise_var)
    eps = rng.standard_normal(x.shape, dtype=dtype) * dtype.type(sigma)
    if spec.kind == "awgn":
        return x + eps, None
    h = rayleigh_gain(rng, x.shape[0]).astype(dtype)
    return h[:, None] * x + eps, h


def measure_psnr(x: np.ndarray, y: np.ndarray, signal_power: float = 1.0) -> float:
    """Empirical PSNR in dB from a transmitted/received pair: 10*log10(P / var(y-x))."""
    noise = np.asarray(y) - np.asarray(x)
    return 10.0 * np.log10(signal_power / noise.var())


# -- codec graph fragments ----------------------------------------------------
#
# Encoder: Linear(hidden, ReLU) -> Linear(tx_dim, none)
# Decoder: Linear L1(tx_dim, ReLU) -> Linear L2(hidden, ReLU) -> Linear L3(tx_dim, none)
#          -> LayerNorm over (L1 output + L3 output)


def add_channel_encoder(graph, src: str, prefix: str, tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN) -> str:
    """Append the channel-encoder stack to ``graph`` after ``src``; returns the tx node id."""
    h = graph.add(f"{prefix}.enc_fc1", "linear", src, units=hidden)
    h = graph.add(f"{prefix}.enc_relu1", "relu", h)
    return graph.add(f"{prefix}.enc_fc2", "linear", h, units=tx_dim)


def add_channel_decoder(graph, src: str, prefix: str, tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN) -> str:
    """Append the channel-decoder stack to ``graph`` after ``src``; returns the decoded feature id."""
    l1 = graph.add(f"{prefix}.dec_fc1", "linear", src, units=tx_dim)
    l1r = graph.add(f"{prefix}.dec_relu1", "relu", l1)
    l2 = graph.add(f"{prefix}.dec_fc2", "linear", l1r, units=hidden)
    l2r = graph.add(f"{prefix}.dec_relu2", "relu", l2)
    l3 = graph.add(f"{prefix}.dec_fc3", "linear", l2r, units=tx_dim)
    s = graph.add(f"{prefix}.dec_skip", "add", [l1r, l3])
    return graph.add(f"{prefix}.dec_norm", "layer-norm", s)


def codec_structure(graph, prefix: str) -> list[tuple[str, str, int | None]]:
    """(role, kind, units) rows for the codec nodes under ``prefix``, construction order.

    Used by structural audits against the published layer table.
    """
    rows = []
    for nid in graph.order:
        if not nid.startswith(prefix + "."):
            continue
        role = nid[len(prefix) + 1 :]
        if not (role.startswith("enc_") or role.startswith("dec_")):
            continue
        spec = graph.nodes[nid].spec
        rows.append((role, spec.kind, spec.attrs.get("units")))
    return rows


def build_encoder_graph(in_width: int, tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN):
    from .network import NetworkGraph

    g = NetworkGraph((in_width,))
    tx = add_channel_encoder(g, g.input_id, "codec", tx_dim=tx_dim, hidden=hidden)
    g.mark_output("tx", tx)
    return g


def build_decoder_graph(tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN):
    from .network import NetworkGraph

    g = NetworkGraph((tx_dim,))
    out = add_channel_decoder(g, g.input_id, "codec", tx_dim=tx_dim, hidden=hidden)
    g.mark_output("feature", out)
    return g


def channel_encode(m: np.ndarray, params, tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN) -> np.ndarray:
    """Run the standalone encoder stack over a (N, D) feature batch."""
    from .engine import forward

    g = build_encoder_graph(int(m.shape[-1]), tx_dim=tx_dim, hidden=hidden)
    return forward(g, params, np.asarray(m))[g.outputs["tx"]]


def channel_decode(y: np.ndarray, params, tx_dim: int = TX_DIM, hidden: int = CODEC_HIDDEN) -> np.ndarray:
    """Run the standalone decoder stack over a (N, tx_dim) received batch."""
    from .engine import forward

    if y.shape[-1] != tx_dim:
        raise TocError(f"decoder expects width {tx_dim}, got {y.shape[-1]}")
    g = build_decoder_graph(tx_dim=tx_dim, hidden=hidden)
    return forward(g, params, np.asarray(y))[g.outputs["feature"]]
