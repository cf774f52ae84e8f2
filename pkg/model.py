# =============================================================================
#           HADES TOOLKIT - LANGUAGE MODEL STACK
#           EMBEDDING, PRE-NORM RESIDUAL BLOCKS, PARAMETER/FLOPS CALCULATORS,
#           CHECKPOINT FORMAT
# =============================================================================

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import pandas as pd

from errors import CheckpointError, ConfigError, MissingInputError, ShapeError
from hades_block import (
    NORM_EPS,
    BlockParams,
    block_backward,
    block_shapes,
    decode_step,
    forward_block,
    init_block_params,
)
from hades_block import InferenceCache  # noqa: F401  (re-exported for callers)
from numerics import Rng, check_finite
from router import ROUTER_MODES, RouterConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HADESCKP"
CHECKPOINT_VERSION = 1

# Per-token FLOPs constants, printed with every report
C_RMS = 4
C_TOP = 2
C_SSD = 6

# Parameter total the 370M reference configuration states for Mamba2
STATED_BASELINE_TOTAL = 368_346_624


def config_hash(mapping):
    """Short sha256 of a config mapping, stable across key order"""
    blob = json.dumps(mapping, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def provenance_line(mapping, label):
    return f"# config_hash={config_hash(mapping)} {label}"


@dataclass
class ModelConfig:
    d: int = 16
    M: int = 4
    H: int = 2
    S: int = 1
    P: int = 8
    N: int = 4
    d_conv: int = 4
    n_layer: int = 2
    vocab: int = 256
    gamma: float = 0.25
    lambda1: float = 1e-3
    lambda2: float = 1e-3
    epsilon: float = 1e-10
    router_mode: str = "spectral"
    tie_embeddings: bool = False
    router_seed: int = 0
    position_horizon: int = 512

    @property
    def E(self):
        return self.M - self.S

    @property
    def Q(self):
        return self.H - self.S

    def router_config(self):
        return RouterConfig(
            M=self.M, S=self.S, H=self.H, gamma=self.gamma, epsilon=self.epsilon,
            mode=self.router_mode, seed=self.router_seed, position_horizon=self.position_horizon,
        )

    def validate(self):
        for name in ("d", "M", "H", "P", "N", "d_conv"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_layer < 0:
            raise ConfigError("n_layer must be non-negative")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be at least 2, got {self.vocab}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.router_mode not in ROUTER_MODES:
            raise ConfigError(f"unknown router mode '{self.router_mode}'")
        self.router_config().validate()
        return self

    def baseline(self):
        """Same dimensions as a plain Mamba2 block: every filter shared, router inert"""
        return replace(self, H=self.M, S=self.M, gamma=0.0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data).validate()


PRESETS = {
    "paper-370m": ModelConfig(d=1024, M=32, H=16, S=8, P=64, N=128, d_conv=4, n_layer=48,
                              vocab=50277, gamma=0.25, lambda1=1e-3, lambda2=1e-3),
    # desk scale: epsilon 1.0 keeps the balance term O(1) when a token's mean score is near zero
    "desk-tiny": ModelConfig(d=16, M=4, H=2, S=1, P=8, N=4, d_conv=4, n_layer=2, vocab=256, epsilon=1.0),
    "desk-copy": ModelConfig(d=64, M=8, H=4, S=2, P=16, N=16, d_conv=4, n_layer=2, vocab=256, epsilon=1.0),
}


def model_shapes(cfg):
    """Every tensor the model constructor allocates, by name"""
    shapes = {"embed_in": (cfg.vocab, cfg.d)}
    for layer in range(cfg.n_layer):
        shapes[f"layers.{layer}.norm"] = (cfg.d,)
        for name, shape in block_shapes(cfg).items():
            shapes[f"layers.{layer}.{name}"] = shape
    shapes["norm_f"] = (cfg.d,)
    if not cfg.tie_embeddings:
        shapes["embed_out"] = (cfg.vocab, cfg.d)
    return shapes


def rms_norm(x, w, eps=NORM_EPS):
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    normed = x / rms
    return normed * w, normed, rms


def rms_norm_plain_backward(d_out, normed, rms, w):
    d_w = np.sum((d_out * normed).reshape(-1, normed.shape[-1]), axis=0)
    d_n = d_out * w
    d_x = (d_n - normed * np.mean(d_n * normed, axis=-1, keepdims=True)) / rms
    return d_x, d_w


class HadesModel:
    """L-block HADES language model over a flat name -> tensor mapping"""

    def __init__(self, cfg, params):
        self.cfg = cfg.validate()
        self.params = params
        expected = model_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names disagree with config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"tensor '{name}' has shape {params[name].shape}, expected {shape}")

    @classmethod
    def initialize(cls, cfg, seed=0):
        cfg.validate()
        rng = Rng(seed)
        params = {"embed_in": rng.normal((cfg.vocab, cfg.d))}
        for layer in range(cfg.n_layer):
            params[f"layers.{layer}.norm"] = np.ones(cfg.d)
            params.update(init_block_params(cfg, rng).tensors(prefix=f"layers.{layer}."))
        params["norm_f"] = np.ones(cfg.d)
        if not cfg.tie_embeddings:
            params["embed_out"] = rng.normal((cfg.vocab, cfg.d), scale=cfg.d ** -0.5)
        logger.debug("initialized model with %d tensors (seed %d)", len(params), seed)
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg):
        return cls(cfg, {name: np.zeros(shape) for name, shape in model_shapes(cfg).items()})

    @property
    def embed_out(self):
        return self.params["embed_in"] if self.cfg.tie_embeddings else self.params["embed_out"]

    def block(self, layer):
        return BlockParams.from_tensors(self.params, prefix=f"layers.{layer}.")

    def parameter_count(self):
        return int(sum(array.size for array in self.params.values()))

    def copy(self):
        return HadesModel(self.cfg, {name: array.copy() for name, array in self.params.items()})

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise ValueError(f"token id outside vocabulary [0, {self.cfg.vocab})")
        return ids.astype(int)

    # --- forward ---

    def forward_sequence(self, ids, gamma=None, collect_records=True):
        """One sequence; returns (logits (T, V), aux, records, caches, tape)"""
        ids = self._check_ids(ids)
        cfg = self.cfg
        U = self.params["embed_in"][ids]
        aux = {"balance": 0.0, "diversity": 0.0}
        records, caches, layer_tapes = [], [], []
        for layer in range(cfg.n_layer):
            normed_in, n_hat, rms = rms_norm(U, self.params[f"layers.{layer}.norm"])
            o, block_aux, block_records, cache, tape = forward_block(
                normed_in, self.block(layer), cfg, layer=layer,
                collect_records=collect_records, gamma=gamma,
            )
            layer_tapes.append((n_hat, rms, tape))
            U = U + o
            aux["balance"] += block_aux["balance"]
            aux["diversity"] += block_aux["diversity"]
            records.extend(block_records)
            caches.append(cache)
        if cfg.n_layer:
            aux = {key: value / cfg.n_layer for key, value in aux.items()}
        out_f, n_f, rms_f = rms_norm(U, self.params["norm_f"])
        logits = check_finite("logits", out_f @ self.embed_out.T)
        tape = {"ids": ids, "layers": layer_tapes, "final": (out_f, n_f, rms_f)}
        return logits, aux, records, caches, tape

    def forward(self, batch_ids, gamma=None, collect_records=True, keep_tape=False):
        """Batch forward over (B, T) ids; aux losses are means over sequences and layers.

        Returns (logits (B, T, V), aux, records) and the per-sequence tapes
        when ``keep_tape`` is set.
        """
        batch_ids = np.atleast_2d(np.asarray(batch_ids))
        logits, tapes, records = [], [], []
        aux = {"balance": 0.0, "diversity": 0.0}
        for b, ids in enumerate(batch_ids):
            seq_logits, seq_aux, seq_records, _, tape = self.forward_sequence(
                ids, gamma=gamma, collect_records=collect_records)
            logits.append(seq_logits)
            tapes.append(tape)
            for key in aux:
                aux[key] += seq_aux[key] / len(batch_ids)
            records.append(seq_records)
        logits = np.stack(logits)
        if keep_tape:
            return logits, aux, records, tapes
        return logits, aux, records

    # --- backward ---

    def backward_sequence(self, tape, d_logits, d_balance=0.0, d_diversity=0.0, grads=None):
        """Accumulate parameter gradients of one sequence into ``grads``.

        d_balance / d_diversity weight the model-level aux losses; each
        block receives them divided by the layer count.
        """
        cfg = self.cfg
        if grads is None:
            grads = {name: np.zeros_like(array) for name, array in self.params.items()}
        out_f, n_f, rms_f = tape["final"]
        embed_out_name = "embed_in" if cfg.tie_embeddings else "embed_out"
        grads[embed_out_name] += d_logits.T @ out_f
        d_out_f = d_logits @ self.embed_out
        d_U, d_norm_f = rms_norm_plain_backward(d_out_f, n_f, rms_f, self.params["norm_f"])
        grads["norm_f"] += d_norm_f

        per_block_balance = d_balance / cfg.n_layer if cfg.n_layer else 0.0
        per_block_diversity = d_diversity / cfg.n_layer if cfg.n_layer else 0.0
        for layer in range(cfg.n_layer - 1, -1, -1):
            n_hat, rms, block_tape = tape["layers"][layer]
            d_normed_in, block_grads = block_backward(
                d_U, self.block(layer), cfg, block_tape,
                d_balance=per_block_balance, d_diversity=per_block_diversity,
            )
            norm_name = f"layers.{layer}.norm"
            d_x, d_norm = rms_norm_plain_backward(d_normed_in, n_hat, rms, self.params[norm_name])
            grads[norm_name] += d_norm
            d_U = d_U + d_x
            for name, grad in block_grads.items():
                grads[f"layers.{layer}.{name}"] += grad
        np.add.at(grads["embed_in"], tape["ids"], d_U)
        return grads

    # --- streaming inference ---

    def step(self, token_id, caches):
        """Decode one token through every layer; returns (logits (V,), caches')"""
        token_id = int(self._check_ids([token_id])[0])
        u = self.params["embed_in"][token_id]
        new_caches = []
        for layer in range(self.cfg.n_layer):
            normed_in, _, _ = rms_norm(u, self.params[f"layers.{layer}.norm"])
            o, cache = decode_step(normed_in, self.block(layer), self.cfg, caches[layer], layer=layer)
            new_caches.append(cache)
            u = u + o
        out_f, _, _ = rms_norm(u, self.params["norm_f"])
        return check_finite("logits", out_f @ self.embed_out.T), new_caches

    def generate(self, prompt_ids, max_new_tokens, temperature=0.0, rng=None):
        """Prefill the prompt, then decode; greedy when temperature is 0"""
        prompt_ids = self._check_ids(prompt_ids)
        if prompt_ids.size == 0:
            raise ValueError("generation needs a non-empty prompt")
        logits, _, _, caches, _ = self.forward_sequence(prompt_ids, collect_records=False)
        next_logits = logits[-1]
        produced = []
        for _ in range(max_new_tokens):
            if temperature <= 0.0:
                token = int(np.argmax(next_logits))
            else:
                if rng is None:
                    raise ValueError("sampling with temperature > 0 needs an Rng")
                scaled = next_logits / temperature
                probs = np.exp(scaled - scaled.max())
                probs /= probs.sum()
                token = int(rng.generator.choice(self.cfg.vocab, p=probs))
            produced.append(token)
            next_logits, caches = self.step(token, caches)
        return produced


# --- Parameter calculator ---

@dataclass
class ParamReport:
    mixer_total: int              # per-layer HADES mixer, formula mode
    mamba2_mixer_total: int       # per-layer Mamba2 mixer, formula mode
    hades_added: int              # per-layer router parameters incl. the "+2"
    reduction: int                # model-level reduction without the "+2" term
    reduction_with_plus2: int     # labeled alternative that subtracts 2 per layer
    baseline_total: int
    result: int
    result_with_plus2: int
    baseline_total_residual: int  # stated total minus formula estimate (0 when not stated)
    constructed_total: int
    constructed_baseline_total: int
    constructed_reduction: int
    per_component: pd.DataFrame

    def to_dict(self):
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "per_component"}
        data["per_component"] = self.per_component.to_dict(orient="records")
        return data


def _is_370m_config(cfg):
    ref = PRESETS["paper-370m"]
    return all(getattr(cfg, k) == getattr(ref, k) for k in ("d", "M", "H", "S", "P", "N", "d_conv", "n_layer", "vocab"))


def count_params(cfg):
    """Formula-mode and constructed-mode parameter counts.

    Formula mode follows the component table row by row; constructed mode
    sums the tensors the model constructor allocates.
    """
    cfg.validate()
    d, M, H, S, P, N, K, L = cfg.d, cfg.M, cfg.H, cfg.S, cfg.P, cfg.N, cfg.d_conv, cfg.n_layer
    per_filter = P * (3 * d + K + 1) + d + 3
    router_width = M + H - 2 * S
    plus2 = 2 if router_width else 0
    added = (d + M) * router_width + plus2
    mamba2_mixer = M * per_filter + N * (2 * d + K)
    hades_mixer = H * per_filter + N * (2 * d + K) + added
    reduction_per_layer = (M - H) * per_filter - (d + M) * router_width
    reduction = L * reduction_per_layer
    reduction_plus2 = L * (reduction_per_layer - plus2)

    estimate = L * mamba2_mixer + cfg.vocab * d
    if _is_370m_config(cfg):
        baseline_total = STATED_BASELINE_TOTAL
        residual = STATED_BASELINE_TOTAL - estimate
    else:
        baseline_total, residual = estimate, 0

    shapes = model_shapes(cfg)
    base_shapes = model_shapes(cfg.baseline())
    constructed = int(sum(math.prod(s) for s in shapes.values()))
    constructed_base = int(sum(math.prod(s) for s in base_shapes.values()))

    hades_block_shapes = block_shapes(cfg)
    base_block_shapes = block_shapes(cfg.baseline())
    size = lambda shapes, *names: int(sum(math.prod(shapes[n]) for n in names))
    rows = [
        ("in_proj", d * (2 * M * P + 2 * N + M), d * (2 * H * P + 2 * N + M), ("W_in",)),
        ("conv1d", (M * P + N) * K, (H * P + N) * K, ("conv_w", "conv_b")),
        ("out_proj", M * P * d, H * P * d, ("W_out",)),
        ("rms_norm", M * P, H * P, ("norm_weight",)),
        ("ssm_params", 3 * M, 3 * H, ("a_log", "D", "dt_bias")),
        ("hades_router", 0, added, ("W_h",)),
    ]
    table = pd.DataFrame([
        {
            "component": name,
            "mamba2_formula": mamba2,
            "hades_formula": hades,
            "formula_reduction": mamba2 - hades,
            "mamba2_constructed": size(base_block_shapes, *tensors),
            "hades_constructed": size(hades_block_shapes, *tensors),
        }
        for name, mamba2, hades, tensors in rows
    ])

    return ParamReport(
        mixer_total=hades_mixer, mamba2_mixer_total=mamba2_mixer, hades_added=added,
        reduction=reduction, reduction_with_plus2=reduction_plus2,
        baseline_total=baseline_total, result=baseline_total - reduction,
        result_with_plus2=baseline_total - reduction_plus2, baseline_total_residual=residual,
        constructed_total=constructed, constructed_baseline_total=constructed_base,
        constructed_reduction=constructed_base - constructed, per_component=table,
    )


# --- FLOPs calculator ---

@dataclass
class FlopsReport:
    per_token: pd.DataFrame       # prefill rows: operation, mamba2, hades, reduction
    decode_per_token: pd.DataFrame
    routing: pd.DataFrame         # operation, hades
    mamba2_total: float           # over T tokens
    hades_mixer_total: float
    routing_total: float
    hades_total: float
    ratio: float
    routing_share: float
    constants: dict

    def to_dict(self):
        return {
            "per_token": self.per_token.to_dict(orient="records"),
            "decode_per_token": self.decode_per_token.to_dict(orient="records"),
            "routing": self.routing.to_dict(orient="records"),
            "mamba2_total": self.mamba2_total, "hades_mixer_total": self.hades_mixer_total,
            "routing_total": self.routing_total, "hades_total": self.hades_total,
            "ratio": self.ratio, "routing_share": self.routing_share, "constants": self.constants,
        }


def _xlog2x(n):
    return n * math.log2(n) if n > 1 else 0.0


def count_flops(cfg, T, c_rms=C_RMS, c_ssd=C_SSD, c_top=C_TOP):
    """Per-token FLOPs of the mixer (both models) plus HADES routing overhead"""
    if T < 1:
        raise ValueError("sequence length must be at least 1")
    cfg.validate()
    d, M, H, S, P, N, K = cfg.d, cfg.M, cfg.H, cfg.S, cfg.P, cfg.N, cfg.d_conv
    E = M - S
    log_n = math.log2(N) if N > 1 else 1.0

    def mixer_rows(filters, decode=False):
        ssd = filters * (5 * N * P + 2 * P) if decode else c_ssd * filters * N * log_n
        return {
            "in_proj": 2 * d * (2 * filters * P + 2 * N + M),
            "conv1d": 2 * (filters * P + N) * K,
            "out_proj": 2 * filters * P * d,
            "rms_norm": c_rms * filters * P,
            "ssd": ssd,
        }

    def table(decode):
        base, hades = mixer_rows(M, decode), mixer_rows(H, decode)
        return pd.DataFrame([
            {"operation": op, "mamba2": float(base[op]), "hades": float(hades[op]),
             "reduction": float(base[op] - hades[op])}
            for op in base
        ])

    routing = pd.DataFrame([
        {"operation": "residual", "hades": float(2 * d)},
        {"operation": "selection_score_projection", "hades": float(2 * (d + M) * (M + H - 2 * S))},
        {"operation": "top_q_selection", "hades": float(c_top * _xlog2x(E))},
        {"operation": "spectral_bias", "hades": float(2 * H)},
        {"operation": "delta_modulation", "hades": float(2 * H)},
    ])
    per_token = table(decode=False)
    mamba2_total = T * per_token["mamba2"].sum()
    hades_mixer_total = T * per_token["hades"].sum()
    routing_total = T * routing["hades"].sum()
    hades_total = hades_mixer_total + routing_total
    return FlopsReport(
        per_token=per_token, decode_per_token=table(decode=True), routing=routing,
        mamba2_total=float(mamba2_total), hades_mixer_total=float(hades_mixer_total),
        routing_total=float(routing_total), hades_total=float(hades_total),
        ratio=float(hades_total / mamba2_total), routing_share=float(routing_total / hades_total),
        constants={"c_rms": c_rms, "c_ssd": c_ssd, "c_top": c_top, "log_base": 2},
    )


def selection_ratio_table(cfg, settings, T=2048):
    """Parameter and FLOPs figures for a list of (H, S) pairs at the config's M"""
    rows = []
    for H, S in settings:
        variant = replace(cfg, H=H, S=S).validate()
        params = count_params(variant)
        flops = count_flops(variant, T)
        rows.append({
            "H": H, "S": S, "selection_ratio": H / cfg.M,
            "hades_mixer_params": params.mixer_total, "reduction": params.reduction,
            "constructed_total": params.constructed_total,
            "flops_ratio": flops.ratio, "routing_share": flops.routing_share,
        })
    return pd.DataFrame(rows)


# --- Checkpoints ---

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_checkpoint(model, path, dtype="<f4"):
    """Write magic, version, header length, JSON header, then row-major payload"""
    if dtype not in _DTYPES:
        raise ConfigError(f"unsupported checkpoint dtype {dtype}")
    np_dtype = _DTYPES[dtype]
    directory, blobs, offset = [], [], 0
    for name in sorted(model.params):
        blob = np.ascontiguousarray(model.params[name], dtype=np_dtype).tobytes(order="C")
        directory.append({"name": name, "shape": list(model.params[name].shape),
                          "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": directory,
        "payload_bytes": offset,
    }, sort_keys=True).encode("utf-8")
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp_path, path)
    logger.info("saved checkpoint %s (%d tensors, %d payload bytes)", path, len(directory), offset)
    return path


def _validate_directory(directory, payload_bytes):
    spans = []
    for entry in directory:
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"tensor '{entry.get('name')}' has unsupported dtype {entry.get('dtype')}")
        expected = math.prod(entry["shape"]) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise CheckpointError(f"tensor '{entry['name']}' declares {entry['nbytes']} bytes, shape needs {expected}")
        if entry["offset"] < 0 or entry["offset"] + entry["nbytes"] > payload_bytes:
            raise CheckpointError(f"tensor '{entry['name']}' lies outside the payload")
        spans.append((entry["offset"], entry["offset"] + entry["nbytes"], entry["name"]))
    spans.sort()
    for (_, end, name), (start, _, other) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"tensors '{name}' and '{other}' overlap in the payload")
    if sum(end - start for start, end, _ in spans) != payload_bytes:
        raise CheckpointError("payload size does not match the tensor directory")


def load_checkpoint(path):
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a HADES checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError("checkpoint truncated inside the preamble")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    if 16 + header_len > len(data):
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e

    payload = data[16 + header_len:]
    payload_bytes = header.get("payload_bytes", -1)
    if len(payload) != payload_bytes:
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {payload_bytes}")
    _validate_directory(header["tensors"], payload_bytes)

    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(np.float64)
    logger.info("loaded checkpoint %s (%d tensors)", path, len(params))
    return HadesModel(cfg, params)
