"""Model description, weights, shape validation and the float64 reference
forward pass used as the oracle for all fixed-vs-float agreement checks.

Convention: the input X is laid out [seq_len x features] with one row per
time step, and all projections are right-multiplications (out = X @ W).
Attention projections carry no bias; only the output projection has one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")


class ModelError(ValueError):
    pass


@dataclass
class Dense:
    units: int
    activation: str
    w: np.ndarray  # [in, units]
    b: np.ndarray  # [units]
    kind: str = "dense"


@dataclass
class MHA:
    heads: int
    d_model: int
    d_k: int
    w_q: np.ndarray  # [heads, d_model, d_k]
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # [heads*d_k, d_model]
    b_o: np.ndarray  # [d_model]
    kind: str = "mha"


@dataclass
class LayerNorm:
    gamma: np.ndarray  # [d]
    beta: np.ndarray  # [d]
    kind: str = "layer_norm"


@dataclass
class ResidualAdd:
    source: int  # index of an earlier layer whose output is added
    kind: str = "residual_add"


@dataclass
class PoolOverTime:
    mode: str = "mean"
    kind: str = "pool_mean"


LayerSpec = Dense | MHA | LayerNorm | ResidualAdd | PoolOverTime


@dataclass
class ModelGraph:
    name: str
    seq_len: int
    input_dim: int
    layers: list

    def __post_init__(self):
        validate(self)


def _shape_of(layer, in_shape, out_shapes, idx):
    """Output (rows, features) of `layer` given the running input shape."""
    rows, feat = in_shape
    if isinstance(layer, Dense):
        if layer.w.shape != (feat, layer.units):
            raise ModelError(
                f"layer {idx} (dense): weight shape {layer.w.shape} != expected ({feat}, {layer.units})")
        if layer.b.shape != (layer.units,):
            raise ModelError(
                f"layer {idx} (dense): bias shape {layer.b.shape} != expected ({layer.units},)")
        if layer.activation not in ACTIVATIONS:
            raise ModelError(f"layer {idx} (dense): unknown activation {layer.activation!r}")
        return (rows, layer.units)
    if isinstance(layer, MHA):
        if layer.heads < 1 or layer.d_k < 1:
            raise ModelError(f"layer {idx} (mha): heads and d_k must be >= 1")
        if feat != layer.d_model:
            raise ModelError(
                f"layer {idx} (mha): d_model {layer.d_model} != incoming features {feat}")
        h, dm, dk = layer.heads, layer.d_model, layer.d_k
        for name, arr, want in (("w_q", layer.w_q, (h, dm, dk)),
                                ("w_k", layer.w_k, (h, dm, dk)),
                                ("w_v", layer.w_v, (h, dm, dk)),
                                ("w_o", layer.w_o, (h * dk, dm)),
                                ("b_o", layer.b_o, (dm,))):
            if arr.shape != want:
                raise ModelError(
                    f"layer {idx} (mha): {name} shape {arr.shape} != expected {want}")
        return (rows, dm)
    if isinstance(layer, LayerNorm):
        if layer.gamma.shape != (feat,) or layer.beta.shape != (feat,):
            raise ModelError(
                f"layer {idx} (layer_norm): gamma/beta shapes {layer.gamma.shape}/{layer.beta.shape} "
                f"!= expected ({feat},)")
        return in_shape
    if isinstance(layer, ResidualAdd):
        if not (0 <= layer.source < idx):
            raise ModelError(
                f"layer {idx} (residual_add): source {layer.source} must precede the layer")
        if out_shapes[layer.source] != in_shape:
            raise ModelError(
                f"layer {idx} (residual_add): source shape {out_shapes[layer.source]} "
                f"!= current shape {in_shape}")
        return in_shape
    if isinstance(layer, PoolOverTime):
        if layer.mode != "mean":
            raise ModelError(f"layer {idx} (pool): unsupported mode {layer.mode!r}")
        if rows == 1:
            raise ModelError(f"layer {idx} (pool): nothing to pool, rows already collapsed")
        return (1, feat)
    raise ModelError(f"layer {idx}: unknown layer kind {type(layer).__name__}")


def validate(g: ModelGraph) -> None:
    if g.seq_len < 1 or g.input_dim < 1:
        raise ModelError("seq_len and input_dim must be >= 1")
    if not g.layers:
        raise ModelError("empty model")
    shape = (g.seq_len, g.input_dim)
    out_shapes = []
    for i, layer in enumerate(g.layers):
        shape = _shape_of(layer, shape, out_shapes, i)
        out_shapes.append(shape)


def output_shapes(g: ModelGraph) -> list[tuple[int, int]]:
    shape = (g.seq_len, g.input_dim)
    shapes = []
    for i, layer in enumerate(g.layers):
        shape = _shape_of(layer, shape, shapes, i)
        shapes.append(shape)
    return shapes


def count_parameters(g: ModelGraph) -> int:
    n = 0
    for layer in g.layers:
        if isinstance(layer, Dense):
            n += layer.w.size + layer.b.size
        elif isinstance(layer, MHA):
            n += layer.w_q.size + layer.w_k.size + layer.w_v.size + layer.w_o.size + layer.b_o.size
        elif isinstance(layer, LayerNorm):
            n += layer.gamma.size + layer.beta.size
    return n


# ---------------------------------------------------------------------------
# Float64 reference forward pass
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def float_mha(x: np.ndarray, layer: MHA) -> np.ndarray:
    outs = []
    for h in range(layer.heads):
        q = x @ layer.w_q[h]
        k = x @ layer.w_k[h]
        v = x @ layer.w_v[h]
        scores = (q @ k.T) / np.sqrt(layer.d_k)
        outs.append(_softmax_rows(scores) @ v)
    cat = np.concatenate(outs, axis=-1)
    return cat @ layer.w_o + layer.b_o


def float_layernorm(x: np.ndarray, layer: LayerNorm) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    normalized = (x - mean) / np.sqrt(var)
    return normalized * layer.gamma + layer.beta


def float_forward(g: ModelGraph, x: np.ndarray, return_all: bool = False):
    """Double-precision evaluation of the whole graph.

    Returns the final output ([features] after pooling, else
    [rows, features]); with return_all=True also the per-layer outputs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.seq_len, g.input_dim):
        raise ModelError(f"input shape {x.shape} != expected ({g.seq_len}, {g.input_dim})")
    cur = x
    outs = []
    for layer in g.layers:
        if isinstance(layer, Dense):
            cur = cur @ layer.w + layer.b
            if layer.activation == "relu":
                cur = np.maximum(cur, 0.0)
            elif layer.activation == "sigmoid":
                cur = 1.0 / (1.0 + np.exp(-cur))
            elif layer.activation == "softmax":
                cur = _softmax_rows(cur)
        elif isinstance(layer, MHA):
            cur = float_mha(cur, layer)
        elif isinstance(layer, LayerNorm):
            cur = float_layernorm(cur, layer)
        elif isinstance(layer, ResidualAdd):
            cur = cur + outs[layer.source]
        elif isinstance(layer, PoolOverTime):
            cur = cur.mean(axis=0, keepdims=True)
        outs.append(cur)
    final = cur[0] if cur.shape[0] == 1 and any(isinstance(l, PoolOverTime) for l in g.layers) else cur
    if return_all:
        return final, outs
    return final


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------

def _read_weights(entry, base_dir: Path, shape, layer_idx: int, name: str) -> np.ndarray:
    want = 1
    for s in shape:
        want *= s
    if isinstance(entry, dict):
        path = base_dir / entry["weights_file"]
        offset = int(entry.get("offset", 0))  # element offset into the file
        length = int(entry["len"])
        if length != want:
            raise ModelError(
                f"layer {layer_idx}: {name} sidecar len {length} != expected {want}")
        data = np.fromfile(path, dtype="<f8", count=length, offset=offset * 8)
        if data.size != length:
            raise ModelError(f"layer {layer_idx}: {name} sidecar file too short")
        return data.reshape(shape)
    arr = np.asarray(entry, dtype=np.float64)
    if arr.size != want:
        raise ModelError(
            f"layer {layer_idx}: {name} has {arr.size} values, expected {want} for shape {shape}")
    return arr.reshape(shape)


def _layer_from_json(obj: dict, idx: int, base_dir: Path, feat: int) -> LayerSpec:
    kind = obj.get("kind")
    w = obj.get("weights", {})
    if kind == "dense":
        units = int(obj["units"])
        return Dense(units=units, activation=obj.get("activation", "none"),
                     w=_read_weights(w.get("w"), base_dir, (feat, units), idx, "w"),
                     b=_read_weights(w.get("b"), base_dir, (units,), idx, "b"))
    if kind == "mha":
        h, dm, dk = int(obj["heads"]), int(obj["d_model"]), int(obj["d_k"])
        return MHA(heads=h, d_model=dm, d_k=dk,
                   w_q=_read_weights(w.get("w_q"), base_dir, (h, dm, dk), idx, "w_q"),
                   w_k=_read_weights(w.get("w_k"), base_dir, (h, dm, dk), idx, "w_k"),
                   w_v=_read_weights(w.get("w_v"), base_dir, (h, dm, dk), idx, "w_v"),
                   w_o=_read_weights(w.get("w_o"), base_dir, (h * dk, dm), idx, "w_o"),
                   b_o=_read_weights(w.get("b_o"), base_dir, (dm,), idx, "b_o"))
    if kind == "layer_norm":
        return LayerNorm(gamma=_read_weights(w.get("gamma"), base_dir, (feat,), idx, "gamma"),
                         beta=_read_weights(w.get("beta"), base_dir, (feat,), idx, "beta"))
    if kind == "residual_add":
        return ResidualAdd(source=int(obj["source"]))
    if kind == "pool_mean":
        return PoolOverTime()
    raise ModelError(f"layer {idx}: unknown layer kind {kind!r}")


def load_model(path: str | Path) -> ModelGraph:
    path = Path(path)
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ModelError(f"parse error in {path}: line {e.lineno} column {e.colno}: {e.msg}")
    for key in ("name", "seq_len", "input_dim", "layers"):
        if key not in obj:
            raise ModelError(f"{path}: missing required field {key!r}")
    seq_len, input_dim = int(obj["seq_len"]), int(obj["input_dim"])
    if not obj["layers"]:
        raise ModelError("empty model")
    layers = []
    feat = input_dim
    for i, lo in enumerate(obj["layers"]):
        layer = _layer_from_json(lo, i, path.parent, feat)
        if isinstance(layer, Dense):
            feat = layer.units
        elif isinstance(layer, MHA):
            feat = layer.d_model
        layers.append(layer)
    return ModelGraph(name=str(obj["name"]), seq_len=seq_len, input_dim=input_dim, layers=layers)


def _weights_json(arr: np.ndarray) -> list:
    return [float(v) for v in arr.reshape(-1)]


def _layer_to_json(layer: LayerSpec) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "units": layer.units, "activation": layer.activation,
                "weights": {"w": _weights_json(layer.w), "b": _weights_json(layer.b)}}
    if isinstance(layer, MHA):
        return {"kind": "mha", "heads": layer.heads, "d_model": layer.d_model, "d_k": layer.d_k,
                "weights": {"w_q": _weights_json(layer.w_q), "w_k": _weights_json(layer.w_k),
                            "w_v": _weights_json(layer.w_v), "w_o": _weights_json(layer.w_o),
                            "b_o": _weights_json(layer.b_o)}}
    if isinstance(layer, LayerNorm):
        return {"kind": "layer_norm",
                "weights": {"gamma": _weights_json(layer.gamma), "beta": _weights_json(layer.beta)}}
    if isinstance(layer, ResidualAdd):
        return {"kind": "residual_add", "source": layer.source}
    if isinstance(layer, PoolOverTime):
        return {"kind": "pool_mean"}
    raise ModelError(f"cannot serialize {type(layer).__name__}")


def save_model(g: ModelGraph, path: str | Path) -> None:
    """Write canonical JSON: sorted keys, inline weights, repr floats."""
    obj = {"name": g.name, "seq_len": g.seq_len, "input_dim": g.input_dim,
           "layers": [_layer_to_json(l) for l in g.layers]}
    text = json.dumps(obj, sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def save_model_sidecar(g: ModelGraph, json_path: str | Path) -> None:
    """Write the graph as JSON with all weights in one little-endian
    float64 sidecar file next to it (offsets counted in elements)."""
    json_path = Path(json_path)
    bin_name = json_path.stem + ".weights.bin"
    chunks: list[np.ndarray] = []
    offset = 0

    def ref(arr: np.ndarray) -> dict:
        nonlocal offset
        chunks.append(np.asarray(arr, dtype="<f8").reshape(-1))
        entry = {"weights_file": bin_name, "offset": offset, "len": int(arr.size)}
        offset += int(arr.size)
        return entry

    layers = []
    for layer in g.layers:
        obj = _layer_to_json(layer)
        if "weights" in obj:
            slot = {}
            if isinstance(layer, Dense):
                slot = {"w": ref(layer.w), "b": ref(layer.b)}
            elif isinstance(layer, MHA):
                slot = {"w_q": ref(layer.w_q), "w_k": ref(layer.w_k),
                        "w_v": ref(layer.w_v), "w_o": ref(layer.w_o),
                        "b_o": ref(layer.b_o)}
            elif isinstance(layer, LayerNorm):
                slot = {"gamma": ref(layer.gamma), "beta": ref(layer.beta)}
            obj["weights"] = slot
        layers.append(obj)
    obj = {"name": g.name, "seq_len": g.seq_len, "input_dim": g.input_dim, "layers": layers}
    json_path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
    np.concatenate(chunks).tofile(json_path.parent / bin_name)


# ---------------------------------------------------------------------------
# Example models (synthetic weights, deterministic)
# ---------------------------------------------------------------------------

def _dense(rng, d_in, units, activation="none", gain=1.0) -> Dense:
    w = rng.standard_normal((d_in, units)) * (gain / np.sqrt(d_in))
    b = rng.standard_normal(units) * 0.05
    return Dense(units=units, activation=activation, w=w, b=b)


def _mha(rng, d_model, heads, d_k, out_gain=1.0) -> MHA:
    scale = 1.0 / np.sqrt(d_model)
    return MHA(heads=heads, d_model=d_model, d_k=d_k,
               w_q=rng.standard_normal((heads, d_model, d_k)) * scale,
               w_k=rng.standard_normal((heads, d_model, d_k)) * scale,
               w_v=rng.standard_normal((heads, d_model, d_k)) * scale,
               w_o=rng.standard_normal((heads * d_k, d_model)) * (out_gain / np.sqrt(heads * d_k)),
               b_o=rng.standard_normal(d_model) * 0.05)


def _block(rng, layers, d_model, heads, d_k, with_norm, gain):
    """Append one transformer block: MHA + residual (+ norm), then a
    two-layer feed-forward with its own residual (+ norm).  `gain` damps
    the branch outputs so residual chains without normalization keep
    activations inside the modest ranges fixed-point inference expects."""
    pre = len(layers) - 1
    layers.append(_mha(rng, d_model, heads, d_k, out_gain=gain))
    layers.append(ResidualAdd(source=pre))
    if with_norm:
        layers.append(LayerNorm(gamma=np.ones(d_model) + rng.standard_normal(d_model) * 0.05,
                                beta=rng.standard_normal(d_model) * 0.05))
    ff_in = len(layers) - 1
    layers.append(_dense(rng, d_model, d_model, "relu"))
    layers.append(_dense(rng, d_model, d_model, gain=gain))
    layers.append(ResidualAdd(source=ff_in))
    if with_norm:
        layers.append(LayerNorm(gamma=np.ones(d_model) + rng.standard_normal(d_model) * 0.05,
                                beta=rng.standard_normal(d_model) * 0.05))


def _probe_inputs(seq_len, input_dim, n, rng) -> np.ndarray:
    """Diverse tone-mixture sequences matching the scale of the synthetic
    datasets; used only to calibrate the output head."""
    t = np.linspace(0.0, 1.0, seq_len)[:, None]
    xs = np.empty((n, seq_len, input_dim))
    for i in range(n):
        freq = rng.uniform(1.0, 6.0, size=input_dim)
        phase = rng.uniform(0, 2 * np.pi, size=input_dim)
        amp = rng.uniform(0.8, 2.0, size=input_dim)
        off = rng.uniform(-0.5, 0.5, size=input_dim)
        xs[i] = amp * np.sin(2 * np.pi * freq * t + phase) + off \
            + rng.normal(0.0, 0.15, size=(seq_len, input_dim))
    return xs


def _calibrate_head(layers, name, seq_len, input_dim, rng, target_std=4.0):
    """Rescale and recenter the final logits against a probe batch so the
    synthetic model produces balanced, well-separated class scores (the
    role training plays for a real model)."""
    body = ModelGraph(name=name, seq_len=seq_len, input_dim=input_dim, layers=layers[:-1])
    probes = _probe_inputs(seq_len, input_dim, 64, rng)
    hidden = np.stack([float_forward(body, x) for x in probes])
    head = layers[-1]
    z = hidden @ head.w + head.b
    mu = z.mean(axis=0)
    sd = np.maximum(z.std(axis=0), 1e-6)
    s = target_std / sd
    head.w = head.w * s
    head.b = (head.b - mu) * s


def _example(name, seed, seq_len, input_dim, blocks, d_model, heads, d_k,
             with_norm, head_hidden, out_dim, out_activation, gain=1.0) -> ModelGraph:
    rng = np.random.default_rng(seed)
    layers = [_dense(rng, input_dim, d_model)]
    for _ in range(blocks):
        _block(rng, layers, d_model, heads, d_k, with_norm, gain)
    layers.append(PoolOverTime())
    layers.append(_dense(rng, d_model, head_hidden, "relu"))
    layers.append(_dense(rng, head_hidden, out_dim, out_activation))
    _calibrate_head(layers, name, seq_len, input_dim, rng)
    return ModelGraph(name=name, seq_len=seq_len, input_dim=input_dim, layers=layers)


def build_example_models() -> dict[str, ModelGraph]:
    """Three bundled model configurations covering the benchmark shapes:
    a 50x1 binary anomaly detector without normalization layers, a 15x6
    three-class tagger, and a 100x2 binary detector with a sigmoid head.
    """
    engine = _example("engine", seed=101, seq_len=50, input_dim=1, blocks=3,
                      d_model=16, heads=2, d_k=8, with_norm=False,
                      head_hidden=8, out_dim=2, out_activation="softmax", gain=0.35)
    btag = _example("btag", seed=202, seq_len=15, input_dim=6, blocks=3,
                    d_model=64, heads=4, d_k=16, with_norm=True,
                    head_hidden=16, out_dim=3, out_activation="softmax")
    gw = _example("gw", seed=303, seq_len=100, input_dim=2, blocks=2,
                  d_model=32, heads=2, d_k=16, with_norm=True,
                  head_hidden=8, out_dim=1, out_activation="sigmoid")
    return {"engine": engine, "btag": btag, "gw": gw}


def bundled_model_path(name: str) -> Path:
    return Path(__file__).parent / "models" / f"{name}.json"
