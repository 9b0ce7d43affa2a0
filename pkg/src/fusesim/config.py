"""YAML experiment configuration: defaults, schema validation and object builders."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from fusesim.attention import ModelShape
from fusesim.errors import ConfigError, FuseSimError
from fusesim.gpusim import GpuSpec

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "gpu": {
        "num_sms": 108,
        "compute_rate_per_sm": 156e6 / 108,
        "mem_bandwidth_total": 1e6,
        "max_ctas_per_sm": 4,
        "shared_mem_per_sm": 164 * 1024,
        "compute_warps_to_saturate": 4,
        "memory_warps_to_saturate": 8,
    },
    # Llama-3-8B attention geometry; 218M weights per transformer layer
    "model": {"num_q_heads": 32, "num_kv_heads": 8, "head_dim": 128, "params_per_layer": 218e6},
    "attn_verify": {
        "instances": 200,
        "max_chunk": 64,
        "max_context": 2048,
        "head_dims": [4, 8, 64],
        "tiles": [1, 8, 16, 64, 128],
        "max_splits": 8,
        "tolerance": 1e-10,
        "fault_mask_shift": 0,
    },
    "kernel_sim": {
        "mode": "chunks",
        "strategies": ["serial", "streams", "cta", "warp", "intra", "smaware"],
        "prompt_len": 16384,
        "chunk_size": 512,
        "chunks": None,
        "decode_batch_sizes": [54, 55],
        "decode_context": 4096,
        "ctas_per_sm": "auto",
        "prefill_splits": "limited",
        "sweep_contexts": [4096, 8192, 12288, 16384, 20480],
        "sweep_chunks": [512, 1024, 2048],
        "sweep_batch_sizes": [16, 64],
    },
    "microbench": {
        "compute_iters": [25, 50, 100, 200, 400],
        "array_len": 4096,
        "strategies": ["serial", "streams", "cta", "warp", "intra", "smaware"],
    },
    "serve": {
        "qps": [5.0],
        "num_requests": 512,
        "prefill": {"kind": "lognormal", "mean": 4096, "sigma": 0.6, "lo": 512, "hi": 16384},
        "decode": {"kind": "lognormal", "mean": 128, "sigma": 0.6, "lo": 16, "hi": 512},
        "trace_file": None,
        "policies": ["prefill_prioritized", "chunked_hybrid"],
        "fused": [False, True],
        "chunk_size": 1024,
        "max_batch": 256,
        "token_budget": None,
        "attention_fraction": 0.6,
        "reference_context": 16384,
        "reference_chunk": 1024,
        "reference_decodes": 32,
        "decode_reference_cost": 50.0,
        "context_bucket": 512,
        "decode_bucket": 8,
        "stall_thresholds": [200.0, 500.0],
    },
    "report": {"figures": False},
}


def schema() -> dict:
    return json.loads(resources.files("fusesim").joinpath("config_schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def validate(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(schema()).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'.'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def parse_config(text: str) -> dict:
    """Parse YAML text, overlay it on the defaults and validate the result."""
    try:
        user = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse config{where}: {getattr(exc, 'problem', exc)}") from None
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError("config must be a mapping at the top level")
    validate(user)
    cfg = _merge(DEFAULTS, user)
    validate(cfg)
    check_consistency(cfg)
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def check_consistency(cfg: dict) -> None:
    """Cross-field checks the schema cannot express."""
    try:
        shape_from(cfg)
        gpu_from(cfg)
    except FuseSimError as exc:
        raise ConfigError(str(exc)) from None
    for name in ("prefill", "decode"):
        d = cfg["serve"][name]
        if d["lo"] > d["hi"]:
            raise ConfigError(f"serve.{name}: lo > hi")
    ks = cfg["kernel_sim"]
    if ks["chunks"] is not None:
        n_chunks = -(-ks["prompt_len"] // ks["chunk_size"])
        bad = [c for c in ks["chunks"] if c >= n_chunks]
        if bad:
            raise ConfigError(f"kernel_sim.chunks: {bad} beyond the last chunk index {n_chunks - 1}")


def gpu_from(cfg: dict) -> GpuSpec:
    return GpuSpec(**cfg["gpu"])


def shape_from(cfg: dict) -> ModelShape:
    m = cfg["model"]
    return ModelShape(m["num_q_heads"], m["num_kv_heads"], m["head_dim"])
