"""Closed-form sequence length, parameter, FLOP and activation-memory estimates.

Multiply-adds count as 2 FLOPs.  Token counts use the L spatial tokens; the
single CLS token is ignored so that ratios between patch sizes are exact.
Activation memory assumes a fused attention kernel (no L x L score matrix is
kept) and excludes weights and optimizer state.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .model import EncoderConfig, count_params, patchify_params
from .validation import ConfigError


@dataclass(frozen=True)
class CostEstimate:
    config_hash: str
    name: str
    image_size: int
    patch: int
    seq_len: int
    params: int
    patchify_params: int      # projection weight matrix only: p * p * C * D
    flops_per_image: int
    mixer_core_flops: int     # attention score + weighted sum, or the scan recurrence
    act_mem_bytes: int
    element_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def _attention_block(L: int, D: int) -> tuple[int, int]:
    proj = 8 * L * D * D            # q, k, v, o
    core = 4 * L * L * D            # QK^T and PV
    return proj + core, core


def _scan_block(L: int, D: int, S: int, dirs: int) -> tuple[int, int]:
    proj = 2 * L * D * S + dirs * 3 * 2 * L * D * S + 2 * L * S * D  # u, gates, output
    core = dirs * 3 * L * S         # a*h + b*u, then c*h
    return proj + core, core


def _block_activations(cfg: EncoderConfig, L: int) -> int:
    D, M = cfg.embed_dim, cfg.mlp_dim
    common = 2 * L * D + 2 * L * D + 2 * L * M  # two norms, two residual outputs, MLP hidden pre/post GELU
    if cfg.mixer_kind == "attention":
        return common + 4 * L * D + L * cfg.n_heads  # q, k, v, context; row log-sum-exp
    S = cfg.state_dim
    dirs = 1 if cfg.direction == "forward" else 2
    return common + L * S + dirs * 5 * L * S + L * D  # u; a, b, c, h, y per direction; output


def estimate(cfg: EncoderConfig, element_bytes: int = 2) -> CostEstimate:
    if element_bytes < 1:
        raise ConfigError(f"element_bytes must be >= 1, got {element_bytes}")
    pc = cfg.patch_config
    L = pc.seq_len
    L0 = pc.base_grid[0] * pc.base_grid[1]
    D = cfg.embed_dim
    flops = 2 * L0 * pc.patch_dim * D
    core_total = 0
    for _ in range(cfg.depth):
        if cfg.mixer_kind == "attention":
            f, core = _attention_block(L, D)
        else:
            f, core = _scan_block(L, D, cfg.state_dim, 1 if cfg.direction == "forward" else 2)
        flops += f + 4 * L * D * cfg.mlp_dim
        core_total += core
    if cfg.num_classes:
        flops += 2 * D * cfg.num_classes
    act = L * D + cfg.depth * _block_activations(cfg, L)  # embedded tokens + per-block intermediates
    return CostEstimate(cfg.config_hash, cfg.name, cfg.image_size, cfg.patch, L, count_params(cfg),
                        patchify_params(cfg, include_bias=False), flops, core_total,
                        act * element_bytes, element_bytes)


def fixed_length_input_scan(base_cfg: EncoderConfig, scales, element_bytes: int = 2) -> list[CostEstimate]:
    """Grow input size and patch size by the same integer factor; L stays put."""
    out = []
    for s in scales:
        if int(s) != s or s < 1:
            raise ConfigError(f"scale must be a positive integer, got {s}")
        s = int(s)
        out.append(estimate(base_cfg.with_patch(base_cfg.patch * s, base_cfg.image_size * s), element_bytes))
    return out


def block_params_only(est: CostEstimate, cfg: EncoderConfig) -> int:
    """Parameters outside the patch projection and the positional table."""
    return est.params - patchify_params(cfg) - est.seq_len * cfg.embed_dim


def _fmt_bytes(n: int) -> str:
    return f"{n / 2 ** 20:,.1f}MB"


def report_text(estimates: list[CostEstimate]) -> str:
    head = f"{'model':<18} {'input':>5} {'p':>3} {'L':>7} {'params':>13} {'patchify':>11} {'GFLOPs':>10} {'act mem':>12}"
    lines = [head, "-" * len(head)]
    for e in estimates:
        lines.append(f"{e.name:<18} {e.image_size:>5} {e.patch:>3} {e.seq_len:>7} {e.params:>13,} "
                     f"{e.patchify_params:>11,} {e.flops_per_image / 1e9:>10.2f} {_fmt_bytes(e.act_mem_bytes):>12}")
    lines.append(f"activation memory at {estimates[0].element_bytes if estimates else 2} bytes per element, "
                 "per image, weights and optimizer excluded")
    return "\n".join(lines) + "\n"


def report_json(estimates: list[CostEstimate]) -> str:
    return json.dumps({e.config_hash: e.to_dict() for e in estimates}, indent=2, sort_keys=True) + "\n"
