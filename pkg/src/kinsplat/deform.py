"""Deformation field: positional encoding + MLP predicting attribute deltas.

The field maps an encoded canonical Gaussian center together with an encoded
kinematic state to additive deltas (d_mu, d_rot, d_scale). Opacity is never
predicted. Inputs are affinely normalized to roughly [-1, 1] using ranges
carried by the dataset manifest before sin/cos encoding, since encoding
unbounded coordinates aliases.

All math is plain numpy and dtype-generic (float32 for training, float64 in
gradient tests). The backward pass is exact and hand-written, including the
path through the encodings back to the raw inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .scene import GaussianDeltas, KinematicState
from ._util import atomic_write_bytes

FIELD_MAGIC = b"KSFIELD1"

HEAD_NAMES = ("mu", "rot", "scale")
HEAD_DIMS = {"mu": 3, "rot": 4, "scale": 3}


@dataclass
class PositionalEncoding:
    """Sin/cos frequency encoding, component-major.

    Layout per input vector: the raw input first (when ``include_input``),
    then for each component i and frequency k in 0..L-1 the pair
    (sin(2^k pi x_i), cos(2^k pi x_i)).
    """

    num_freqs: int
    include_input: bool = True

    def __post_init__(self):
        if self.num_freqs < 1:
            raise ValueError("num_freqs must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_freqs + (1 if self.include_input else 0))

    def _freqs(self, dtype) -> np.ndarray:
        return (2.0 ** np.arange(self.num_freqs) * np.pi).astype(dtype)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """(B, d) -> (B, out_dim(d)). A single vector may be passed as (d,)."""
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        b, d = x.shape
        ang = x[:, :, None] * self._freqs(x.dtype)  # (B, d, L)
        enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(b, d * 2 * self.num_freqs)
        out = np.concatenate([x, enc], axis=1) if self.include_input else enc
        return out[0] if squeeze else out

    def encode_backward(self, x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
        """Gradient of encode w.r.t. x given upstream d_out (same batching)."""
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
            d_out = np.asarray(d_out)[None]
        b, d = x.shape
        freqs = self._freqs(x.dtype)
        ang = x[:, :, None] * freqs
        lead = d if self.include_input else 0
        d_enc = d_out[:, lead:].reshape(b, d, self.num_freqs, 2)
        d_x = (freqs[None, None, :] * (np.cos(ang) * d_enc[..., 0] - np.sin(ang) * d_enc[..., 1])).sum(axis=2)
        if self.include_input:
            d_x = d_x + d_out[:, :d]
        return d_x[0] if squeeze else d_x


@dataclass
class InputNormalization:
    """Affine per-component normalization (v - center) / halfspan."""

    kin_center: np.ndarray  # (8,)
    kin_halfspan: np.ndarray  # (8,)
    mu_center: np.ndarray  # (3,)
    mu_halfspan: float

    def __post_init__(self):
        self.kin_center = np.asarray(self.kin_center, dtype=np.float64).reshape(8)
        self.kin_halfspan = np.asarray(self.kin_halfspan, dtype=np.float64).reshape(8)
        self.mu_center = np.asarray(self.mu_center, dtype=np.float64).reshape(3)
        # Degenerate (constant) components normalize to 0 instead of dividing
        # by zero; their halfspan is forced to 1.
        self.kin_halfspan = np.where(self.kin_halfspan < 1e-12, 1.0, self.kin_halfspan)
        self.mu_halfspan = float(self.mu_halfspan) if self.mu_halfspan > 1e-12 else 1.0

    @staticmethod
    def from_ranges(kin_ranges, mu_center, mu_halfspan) -> "InputNormalization":
        """kin_ranges: (8, 2) array of [lo, hi] per kinematic component."""
        r = np.asarray(kin_ranges, dtype=np.float64).reshape(8, 2)
        return InputNormalization(
            kin_center=0.5 * (r[:, 0] + r[:, 1]),
            kin_halfspan=0.5 * (r[:, 1] - r[:, 0]),
            mu_center=mu_center,
            mu_halfspan=mu_halfspan,
        )

    @staticmethod
    def identity() -> "InputNormalization":
        return InputNormalization(np.zeros(8), np.ones(8), np.zeros(3), 1.0)

    def to_dict(self) -> dict:
        return {
            "kin_center": self.kin_center.tolist(),
            "kin_halfspan": self.kin_halfspan.tolist(),
            "mu_center": self.mu_center.tolist(),
            "mu_halfspan": self.mu_halfspan,
        }

    @staticmethod
    def from_dict(d: dict) -> "InputNormalization":
        return InputNormalization(
            np.asarray(d["kin_center"]),
            np.asarray(d["kin_halfspan"]),
            np.asarray(d["mu_center"]),
            float(d["mu_halfspan"]),
        )


def kinematics_to_vector(p: KinematicState, norm: InputNormalization) -> np.ndarray:
    """Normalized 8-vector (translation, quaternion, jaw) for encoding."""
    v = p.as_vector()
    return (v - norm.kin_center) / norm.kin_halfspan


class DeformationField:
    """ReLU MLP over concat(gamma(mu), gamma(p)) with three linear heads.

    Head weights and biases start at zero so the initial prediction is the
    zero deformation and training starts from the canonical scene.
    """

    def __init__(
        self,
        depth: int = 12,
        width: int = 256,
        l_mu: int = 10,
        l_p: int = 6,
        include_input: bool = True,
        norm: InputNormalization | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.width = width
        self.enc_mu = PositionalEncoding(l_mu, include_input)
        self.enc_p = PositionalEncoding(l_p, include_input)
        self.norm = norm if norm is not None else InputNormalization.identity()
        self.dtype = np.dtype(dtype)
        self.in_dim = self.enc_mu.out_dim(3) + self.enc_p.out_dim(8)

        rng = np.random.default_rng(seed)
        self.hidden: list[tuple[np.ndarray, np.ndarray]] = []
        fan_in = self.in_dim
        for _ in range(depth):
            w = (rng.standard_normal((width, fan_in)) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
            b = np.zeros(width, dtype=self.dtype)
            self.hidden.append((w, b))
            fan_in = width
        self.heads = {
            name: (np.zeros((HEAD_DIMS[name], width), dtype=self.dtype),
                   np.zeros(HEAD_DIMS[name], dtype=self.dtype))
            for name in HEAD_NAMES
        }

    # --- parameter plumbing (fixed order for optimizers and checkpoints) ---

    def parameters(self) -> list[np.ndarray]:
        params = []
        for w, b in self.hidden:
            params += [w, b]
        for name in HEAD_NAMES:
            w, b = self.heads[name]
            params += [w, b]
        return params

    def set_parameters(self, arrays) -> None:
        arrays = list(arrays)
        expect = 2 * self.depth + 2 * len(HEAD_NAMES)
        if len(arrays) != expect:
            raise ValueError(f"expected {expect} parameter arrays, got {len(arrays)}")
        it = iter(arrays)
        self.hidden = [(next(it).astype(self.dtype), next(it).astype(self.dtype))
                       for _ in range(self.depth)]
        self.heads = {
            name: (next(it).astype(self.dtype), next(it).astype(self.dtype))
            for name in HEAD_NAMES
        }

    # --- forward ------------------------------------------------------------

    def encode_mu(self, mu: np.ndarray) -> np.ndarray:
        """Normalize and encode canonical centers: (N, 3) -> (N, E_mu)."""
        mu_n = (np.asarray(mu, dtype=self.dtype) - self.norm.mu_center.astype(self.dtype))
        mu_n = mu_n / self.dtype.type(self.norm.mu_halfspan)
        return self.enc_mu.encode(mu_n.astype(self.dtype))

    def encode_kin(self, p: KinematicState) -> np.ndarray:
        """Normalize and encode a kinematic state: -> (E_p,)."""
        v = kinematics_to_vector(p, self.norm).astype(self.dtype)
        return self.enc_p.encode(v)

    def forward_encoded(self, g_mu: np.ndarray, g_p: np.ndarray):
        """Run the MLP on pre-encoded inputs.

        Args:
            g_mu: (N, E_mu) encoded centers.
            g_p: (E_p,) encoded kinematics, broadcast to the batch.

        Returns:
            (GaussianDeltas, cache) where cache feeds :meth:`backward`.
        """
        n = g_mu.shape[0]
        gp = np.broadcast_to(np.asarray(g_p, dtype=self.dtype), (n, g_p.shape[-1]))
        x = np.concatenate([np.asarray(g_mu, dtype=self.dtype), gp], axis=1)
        acts = [x]
        h = x
        for w, b in self.hidden:
            h = np.maximum(h @ w.T + b, 0)
            acts.append(h)
        outs = {name: h @ self.heads[name][0].T + self.heads[name][1] for name in HEAD_NAMES}
        deltas = GaussianDeltas(outs["mu"], outs["rot"], outs["scale"])
        return deltas, {"acts": acts, "n": n}

    def predict_deltas_batch(self, mu: np.ndarray, p: KinematicState) -> GaussianDeltas:
        g_mu = self.encode_mu(mu)
        g_p = self.encode_kin(p)
        deltas, _ = self.forward_encoded(g_mu, g_p)
        return deltas

    def predict_deltas(self, mu, p: KinematicState):
        """Single-Gaussian convenience: returns (d_mu (3,), d_rot (4,), d_scale (3,))."""
        d = self.predict_deltas_batch(np.asarray(mu, dtype=self.dtype).reshape(1, 3), p)
        return d.d_mu[0], d.d_rot[0], d.d_scale[0]

    # --- backward -----------------------------------------------------------

    def backward(self, cache, d_deltas: GaussianDeltas):
        """Exact backprop through heads and hidden stack.

        Returns:
            (grads, d_x) where grads is a list matching :meth:`parameters`
            order and d_x is the gradient at the concatenated encoded input
            (N, in_dim). Weight gradients are summed over the batch.
        """
        acts = cache["acts"]
        h_last = acts[-1]
        if len(d_deltas) != cache["n"]:
            raise ValueError("upstream delta gradient batch size mismatch")
        head_grads = {}
        g_h = np.zeros_like(h_last)
        ups = {"mu": d_deltas.d_mu, "rot": d_deltas.d_rot, "scale": d_deltas.d_scale}
        for name in HEAD_NAMES:
            up = np.asarray(ups[name], dtype=self.dtype)
            w, _ = self.heads[name]
            head_grads[name] = (up.T @ h_last, up.sum(axis=0))
            g_h = g_h + up @ w
        hidden_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.depth
        for i in range(self.depth - 1, -1, -1):
            w, _ = self.hidden[i]
            g_pre = g_h * (acts[i + 1] > 0)
            hidden_grads[i] = (g_pre.T @ acts[i], g_pre.sum(axis=0))
            g_h = g_pre @ w
        grads = []
        for gw, gb in hidden_grads:
            grads += [gw, gb]
        for name in HEAD_NAMES:
            gw, gb = head_grads[name]
            grads += [gw, gb]
        return grads, g_h  # g_h is now the gradient at the network input

    def backward_inputs(self, mu: np.ndarray, p: KinematicState, d_x: np.ndarray):
        """Chain the encoded-input gradient back to raw mu and p.

        Returns:
            (d_mu (N, 3) world units, d_p (8,) raw kinematic units).
        """
        e_mu = self.enc_mu.out_dim(3)
        d_gmu = d_x[:, :e_mu]
        d_gp = d_x[:, e_mu:]
        mu_n = (np.asarray(mu, dtype=self.dtype) - self.norm.mu_center.astype(self.dtype))
        mu_n = mu_n / self.dtype.type(self.norm.mu_halfspan)
        d_mu_n = self.enc_mu.encode_backward(mu_n, d_gmu)
        d_mu = d_mu_n / self.norm.mu_halfspan
        v_n = kinematics_to_vector(p, self.norm).astype(self.dtype)
        d_vn = self.enc_p.encode_backward(v_n, d_gp.sum(axis=0))
        d_p = d_vn / self.norm.kin_halfspan.astype(self.dtype)
        return d_mu, d_p


def field_backward(field: DeformationField, cache, d_deltas: GaussianDeltas):
    """Module-level alias: (weight grads list, d_encoded_input)."""
    return field.backward(cache, d_deltas)


# --- checkpoint io -----------------------------------------------------------


def save_field(field: DeformationField, path) -> None:
    """Write magic + JSON header + flat float32 parameter blob (atomic)."""
    params = field.parameters()
    header = {
        "depth": field.depth,
        "width": field.width,
        "l_mu": field.enc_mu.num_freqs,
        "l_p": field.enc_p.num_freqs,
        "include_input": field.enc_mu.include_input,
        "normalization": field.norm.to_dict(),
        "shapes": [list(p.shape) for p in params],
        "dtype": "float32",
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in params)
    atomic_write_bytes(path, FIELD_MAGIC + struct.pack("<I", len(hdr)) + hdr + blob)


def load_field(path) -> DeformationField:
    with open(path, "rb") as f:
        magic = f.read(len(FIELD_MAGIC))
        if magic != FIELD_MAGIC:
            raise ValueError("not a deformation-field checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    field = DeformationField(
        depth=int(header["depth"]),
        width=int(header["width"]),
        l_mu=int(header["l_mu"]),
        l_p=int(header["l_p"]),
        include_input=bool(header["include_input"]),
        norm=InputNormalization.from_dict(header["normalization"]),
        dtype=np.float32,
    )
    arrays = []
    offset = 0
    flat = np.frombuffer(blob, dtype="<f4")
    for shape in header["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise ValueError("checkpoint blob size does not match header shapes")
    field.set_parameters(arrays)
    return field
