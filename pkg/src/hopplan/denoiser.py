"""Transformer denoiser for state-action trajectory windows.

Tokens are the states and actions of one window, each embedded together
with a sinusoidal encoding of its own noise level. The attention mask keeps
state rows blind to actions entirely and makes action rows causal: an
action attends only tokens at its own timestep or earlier. Across layers,
information from future states still reaches actions indirectly, because
earlier state tokens (which actions may attend) absorb future-state content
through the non-causal state-state attention. That bottleneck through the
current state is deliberate: it is what lets guidance on predicted future
states steer the generated actions.

Internally tokens are laid out block-wise (all states, then all actions);
the alternating-order mask from :func:`build_attention_mask` is permuted to
that layout. Results do not depend on the ordering.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .autodiff import Tensor
from .dataset import NormStats

CHECKPOINT_MAGIC = b"HPCK"
CHECKPOINT_VERSION = 1

ATTENTION_SCHEMES = ("cloc", "full", "diffuser")


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 128
    dropout: float = 0.3
    N: int = 4
    H: int = 32
    H_a: int = 16
    K: int = 20
    state_dim: int = 6
    action_dim: int = 3
    emphasis_scale: float = 5.0
    projection_seed: int = 7
    attention: str = "cloc"
    schedule: str = "cosine"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.H_a > self.H:
            raise ValueError("action horizon H_a must not exceed H")
        if self.emphasis_scale <= 1.0:
            raise ValueError("emphasis scale c must be > 1")
        if self.attention not in ATTENTION_SCHEMES:
            raise ValueError(f"unknown attention scheme '{self.attention}'")

    @property
    def tokens_per_type(self) -> int:
        return self.N + self.H + 1

    @property
    def n_tokens(self) -> int:
        return 2 * self.tokens_per_type

    @property
    def noise_emb_dim(self) -> int:
        return self.embed_dim // 4


def build_attention_mask(N: int, H: int, scheme: str) -> np.ndarray:
    """Boolean mask over 2(N+H)+2 alternating tokens [s_0, a_0, s_1, a_1, ...].

    True means "may attend". cloc: states attend all states and no actions;
    actions attend states and actions at their own time or earlier. full:
    everything. diffuser: only tokens within one timestep.
    """
    if scheme not in ATTENTION_SCHEMES:
        raise ValueError(f"unknown attention scheme '{scheme}'")
    T = N + H + 1
    n = 2 * T
    times = np.repeat(np.arange(T), 2)
    is_state = (np.arange(n) % 2) == 0
    if scheme == "full":
        return np.ones((n, n), dtype=bool)
    if scheme == "diffuser":
        return np.abs(times[:, None] - times[None, :]) <= 1
    mask = np.zeros((n, n), dtype=bool)
    mask[np.ix_(is_state, is_state)] = True
    causal = times[:, None] >= times[None, :]
    mask[~is_state] = causal[~is_state]
    return mask


def _block_permutation(T: int) -> np.ndarray:
    """Alternating index of each block-ordered token (states first, then actions)."""
    perm = np.empty(2 * T, dtype=np.int64)
    perm[:T] = 2 * np.arange(T)
    perm[T:] = 2 * np.arange(T) + 1
    return perm


def emphasis_matrix(state_dim: int, scale: float, seed: int,
                    global_idx=(0, 1, 2)) -> np.ndarray:
    """The fixed A.B product: random projection with global entries scaled by c."""
    A = rngmod.stream("emphasis", seed).standard_normal(
        (state_dim, state_dim)).astype(np.float32)
    B = np.ones(state_dim, dtype=np.float32)
    B[list(global_idx)] = scale
    return A * B[None, :]


def emphasis_project(states: np.ndarray, AB: np.ndarray) -> np.ndarray:
    """[A.B.s ; s] per state vector (applied along the last axis)."""
    return np.concatenate([states @ AB.T, states], axis=-1).astype(np.float32)


def sinusoid_table(levels: int, dim: int) -> np.ndarray:
    """Sinusoidal embeddings for noise levels 0..levels."""
    pos = np.arange(levels + 1, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


class Denoiser:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: DenoiserConfig, init_seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.AB = emphasis_matrix(cfg.state_dim, cfg.emphasis_scale, cfg.projection_seed)
        self.noise_table = sinusoid_table(cfg.K, cfg.noise_emb_dim)
        perm = _block_permutation(cfg.tokens_per_type)
        alt_mask = build_attention_mask(cfg.N, cfg.H, cfg.attention)
        self.mask = alt_mask[np.ix_(perm, perm)]
        self.params = params if params is not None else self._init_params(init_seed)

    # -- parameters --

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.cfg
        E = cfg.embed_dim
        nl = cfg.noise_emb_dim
        shapes: dict[str, tuple[int, ...]] = {
            "state_enc.w1": (2 * cfg.state_dim, E), "state_enc.b1": (E,),
            "state_enc.w2": (E, E), "state_enc.b2": (E,),
            "state_mix.w": (E + nl, E), "state_mix.b": (E,),
            "act_enc.w": (cfg.action_dim, E), "act_enc.b": (E,),
            "act_mix.w": (E + nl, E), "act_mix.b": (E,),
            "pos": (cfg.n_tokens, E),
            "ln_f.g": (E,), "ln_f.b": (E,),
            "head_s.w": (E, cfg.state_dim), "head_s.b": (cfg.state_dim,),
            "head_a.w": (E, cfg.action_dim), "head_a.b": (cfg.action_dim,),
        }
        for i in range(cfg.layers):
            shapes.update({
                f"blk{i}.ln1.g": (E,), f"blk{i}.ln1.b": (E,),
                f"blk{i}.attn.wqkv": (E, 3 * E), f"blk{i}.attn.bqkv": (3 * E,),
                f"blk{i}.attn.wo": (E, E), f"blk{i}.attn.bo": (E,),
                f"blk{i}.ln2.g": (E,), f"blk{i}.ln2.b": (E,),
                f"blk{i}.ffn.w1": (E, 4 * E), f"blk{i}.ffn.b1": (4 * E,),
                f"blk{i}.ffn.w2": (4 * E, E), f"blk{i}.ffn.b2": (E,),
            })
        params: dict[str, Tensor] = {}
        for idx, (name, shape) in enumerate(shapes.items()):
            leaf = name.split(".")[-1]
            if leaf == "g":
                data = np.ones(shape, dtype=np.float32)
            elif leaf.startswith("b"):
                data = np.zeros(shape, dtype=np.float32)
            else:
                data = 0.02 * rngmod.stream("init", seed, idx).standard_normal(
                    shape).astype(np.float32)
            params[name] = ad.parameter(data)
        return params

    def param_count(self) -> int:
        """Trainable parameter count (the fixed emphasis matrix excluded)."""
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    # -- forward --

    def _embed(self, states: np.ndarray, actions: np.ndarray,
               k_s: np.ndarray, k_a: np.ndarray) -> Tensor:
        """Token embeddings in block layout: (B, 2T, E)."""
        p = self.params
        s_in = ad.constant(emphasis_project(states, self.AB))
        h = ad.gelu(ad.add(ad.matmul(s_in, p["state_enc.w1"]), p["state_enc.b1"]))
        h = ad.add(ad.matmul(h, p["state_enc.w2"]), p["state_enc.b2"])
        s_noise = ad.constant(self.noise_table[k_s])
        s_tok = ad.add(ad.matmul(ad.concat([h, s_noise], axis=-1),
                                 p["state_mix.w"]), p["state_mix.b"])
        a_lin = ad.add(ad.matmul(ad.constant(actions), p["act_enc.w"]), p["act_enc.b"])
        a_noise = ad.constant(self.noise_table[k_a])
        a_tok = ad.add(ad.matmul(ad.concat([a_lin, a_noise], axis=-1),
                                 p["act_mix.w"]), p["act_mix.b"])
        tokens = ad.concat([s_tok, a_tok], axis=-2)
        return ad.add(tokens, p["pos"])

    def _attention(self, x: Tensor, i: int, mask: np.ndarray, train: bool,
                   rng: np.random.Generator | None) -> Tensor:
        cfg = self.cfg
        p = self.params
        E = cfg.embed_dim
        dh = E // cfg.heads
        qkv = ad.add(ad.matmul(x, p[f"blk{i}.attn.wqkv"]), p[f"blk{i}.attn.bqkv"])
        q = ad.split_heads(ad.slice_axis(qkv, -1, 0, E), cfg.heads)
        k = ad.split_heads(ad.slice_axis(qkv, -1, E, 2 * E), cfg.heads)
        v = ad.split_heads(ad.slice_axis(qkv, -1, 2 * E, 3 * E), cfg.heads)
        scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(dh))
        probs = ad.softmax_masked(scores, mask)
        if train and cfg.dropout > 0.0:
            keep = (rng.random(probs.shape) >= cfg.dropout).astype(np.float32)
            probs = ad.scale(ad.mul(probs, ad.constant(keep)),
                             1.0 / (1.0 - cfg.dropout))
        ctx = ad.merge_heads(ad.matmul(probs, v))
        return ad.add(ad.matmul(ctx, p[f"blk{i}.attn.wo"]), p[f"blk{i}.attn.bo"])

    def _ln(self, x: Tensor, g: str, b: str) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x), self.params[g]), self.params[b])

    def forward(self, states: np.ndarray, actions: np.ndarray,
                k_s: np.ndarray, k_a: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Full pass over a batch of windows.

        states (B, T, state_dim) and actions (B, T, action_dim) are
        normalized policy-frame token values already noised to their levels
        k_s/k_a (B, T). Returns clean predictions at every token position:
        (B, T, state_dim) and (B, T, action_dim).
        """
        cfg = self.cfg
        T = cfg.tokens_per_type
        states = np.asarray(states, dtype=np.float32)
        actions = np.asarray(actions, dtype=np.float32)
        k_s = np.asarray(k_s)
        k_a = np.asarray(k_a)
        if states.shape[-2] != T or actions.shape[-2] != T:
            raise ad.ShapeError(f"window length {states.shape[-2]} != {T}")
        if np.any(k_s < 0) or np.any(k_s > cfg.K) or np.any(k_a < 0) or np.any(k_a > cfg.K):
            raise ValueError("noise levels outside [0, K]")
        if train and cfg.dropout > 0.0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        x = self._embed(states, actions, k_s, k_a)
        for i in range(cfg.layers):
            x = ad.add(x, self._attention(self._ln(x, f"blk{i}.ln1.g", f"blk{i}.ln1.b"),
                                          i, self.mask, train, rng))
            h = self._ln(x, f"blk{i}.ln2.g", f"blk{i}.ln2.b")
            h = ad.matmul(ad.gelu(ad.add(ad.matmul(h, self.params[f"blk{i}.ffn.w1"]),
                                         self.params[f"blk{i}.ffn.b1"])),
                          self.params[f"blk{i}.ffn.w2"])
            x = ad.add(x, ad.add(h, self.params[f"blk{i}.ffn.b2"]))
        x = self._ln(x, "ln_f.g", "ln_f.b")
        s_part = ad.slice_axis(x, -2, 0, T)
        a_part = ad.slice_axis(x, -2, T, 2 * T)
        states_hat = ad.add(ad.matmul(s_part, self.params["head_s.w"]),
                            self.params["head_s.b"])
        actions_hat = ad.add(ad.matmul(a_part, self.params["head_a.w"]),
                             self.params["head_a.b"])
        return states_hat, actions_hat

    def denoise(self, states: np.ndarray, actions: np.ndarray,
                k_s: np.ndarray, k_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inference on one window; dropout off, no graph recorded.

        Returns (future clean states (H, state_dim) for offsets 1..H,
        future clean actions (H+1, action_dim) for offsets 0..H).
        """
        N = self.cfg.N
        with ad.no_grad():
            s_hat, a_hat = self.forward(states[None], actions[None], k_s[None], k_a[None])
        return s_hat.data[0, N + 1:], a_hat.data[0, N:]

    # -- persistence --

    def tensor_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out["emphasis.AB"] = self.AB
        return out

    def save(self, path: str | Path, norm: NormStats | None = None,
             extra: dict | None = None,
             opt_arrays: dict[str, np.ndarray] | None = None) -> None:
        header = {
            "config": dataclasses.asdict(self.cfg),
            "norm": None if norm is None else {
                k: np.asarray(v).tolist() for k, v in dataclasses.asdict(norm).items()},
            "extra": extra or {},
        }
        arrays = dict(self.tensor_arrays())
        if opt_arrays:
            arrays.update(opt_arrays)
        save_checkpoint(path, header, arrays)

    @staticmethod
    def load(path: str | Path) -> tuple["Denoiser", NormStats | None, dict, dict[str, np.ndarray]]:
        """Returns (model, norm stats, extra header dict, optimizer arrays)."""
        header, arrays = load_checkpoint(path)
        cfg = DenoiserConfig(**header["config"])
        params = {}
        opt_arrays = {}
        for name, arr in arrays.items():
            if name.startswith("opt."):
                opt_arrays[name] = arr
            elif name != "emphasis.AB":
                params[name] = ad.parameter(arr)
        model = Denoiser(cfg, params=params)
        stored_ab = arrays.get("emphasis.AB")
        if stored_ab is not None and not np.array_equal(stored_ab, model.AB):
            raise ValueError("checkpoint emphasis matrix disagrees with projection seed")
        norm = None
        if header.get("norm"):
            norm = NormStats(**{k: np.asarray(v, dtype=np.float32)
                                for k, v in header["norm"].items()})
        return model, norm, header.get("extra", {}), opt_arrays


# ---------------------------------------------------------------------------
# checkpoint container


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint; message names the section."""


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary container: JSON header plus named float32 tensors."""
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, section: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint in section '{section}'")
        out = raw[off:off + n]
        off += n
        return out

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic in section 'magic'")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version} in section 'version'")
    (hlen,) = struct.unpack("<I", take(4, "header"))
    header = json.loads(take(hlen, "header"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"tensor[{i}] name"))
        name = take(nlen, f"tensor[{i}] name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"tensor '{name}' shape"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor '{name}' shape"))
        data = take(4 * int(np.prod(shape)) if ndim else 4, f"tensor '{name}' data")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError("trailing bytes in section 'payload'")
    return header, arrays
