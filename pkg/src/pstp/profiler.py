"""Parameter and multiply-accumulate accounting for :class:`~pstp.model.PSTPNet`.

MACs are counted per sample for the forward pass only:

* a product of ``[m, k]`` and ``[k, n]`` costs ``m * k * n``;
* a bias add, residual add, activation, scaling, softmax or mean costs one
  per element it touches;
* gathers and reshapes are free.

FLOPs are reported as twice the MAC total.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from pstp.config import ABLATIONS, ModelConfig

MODULES = ("input", "tssm", "srsm", "avam", "lgpm", "fusion")


@dataclass
class CostReport:
    params_total: int
    params_by_module: dict[str, int]
    macs_total: int
    macs_by_module: dict[str, int]
    flops_total: int
    config: dict = field(default_factory=dict)
    label: str = "full"

    def __post_init__(self):
        assert self.params_total == sum(self.params_by_module.values())
        assert self.macs_total == sum(self.macs_by_module.values())
        assert self.flops_total == 2 * self.macs_total

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- params


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def analytic_params(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form trainable parameter count per module."""
    D = cfg.D
    mha = 4 * _linear_params(D, D)
    return {
        "input": _linear_params(cfg.D_a, D) + _linear_params(D, D),
        "tssm": _linear_params(2 * D, D) + mha,
        "srsm": mha if cfg.use_srsm else 0,
        "avam": mha if cfg.use_avam else 0,
        "lgpm": 0,
        "fusion": _linear_params(D, D) + _linear_params(D, cfg.C),
    }


def count_params(model) -> dict[str, int]:
    """Trainable scalars per module, read from the model's parameter registry."""
    return model.params_by_module()


# ------------------------------------------------------------------ MACs


def _linear(rows: int, d_in: int, d_out: int) -> tuple[int, int]:
    return rows * d_in * d_out, rows * d_out


def _avf(n: int, D: int, layers: int) -> tuple[int, int]:
    # four projection-free attentions over a length-n sequence, two residual adds per modality
    mm = 4 * 2 * n * n * D
    ew = 4 * 2 * n * n + 4 * n * D
    return layers * mm, layers * ew


def _mha(n_q: int, n_k: int, D: int, heads: int) -> tuple[int, int]:
    """Projections, logits, scaling and softmax of one learned attention call."""
    mm, ew = 0, 0
    for rows in (n_q, n_k, n_k):
        a, b = _linear(rows, D, D)
        mm, ew = mm + a, ew + b
    mm += n_q * n_k * D                 # q k^T over all heads
    ew += 2 * heads * n_q * n_k         # scale + softmax
    return mm, ew


def mac_breakdown(cfg: ModelConfig) -> dict[str, dict[str, int]]:
    """MACs per module, split into matrix-product and elementwise parts."""
    K, T, M, D, h = cfg.K, cfg.T, cfg.M, cfg.D, cfg.heads
    G, tk, L = cfg.gamma, cfg.top_k, cfg.fusion_layers
    tm = cfg.top_m if cfg.use_srsm else M
    out = {m: {"matmul": 0, "elementwise": 0} for m in MODULES}

    def put(module, pair):
        out[module]["matmul"] += pair[0]
        out[module]["elementwise"] += pair[1]

    put("input", _linear(K * T, cfg.D_a, D))
    put("input", _linear(K * T * M, D, D))

    # temporal selection: per-segment fusion, segment embedding, question attention
    mm, ew = _avf(T, D, L)
    put("tssm", (K * mm, K * ew))
    put("tssm", (0, K * 2 * T * D))                  # snippet means
    put("tssm", _linear(K, 2 * D, D))
    put("tssm", (0, K * D))                          # relu
    put("tssm", _mha(1, K, D, h))
    put("tssm", (0, 2 * h * K))                      # head average + keep mask
    put("tssm", (K * D, 0))                          # kept weights @ values
    put("tssm", _linear(1, D, D))                    # output projection

    if cfg.use_srsm:
        mm, ew = _mha(1, M, D, h)
        put("srsm", (G * mm, G * ew))
        put("srsm", (0, G * (h * M + M * D)))        # head average + per-key rows
        put("srsm", _linear(G * tm, D, D))           # output projection of kept rows

    if cfg.use_avam:
        mm, ew = _mha(1, tm, D, h)
        put("avam", (G * mm, G * ew))
        put("avam", (0, G * h * tm))                 # head average
        put("avam", (G * tm * D, 0))                 # weights @ values
        put("avam", _linear(G, D, D))                # output projection
        put("avam", (0, G * tm * D))                 # broadcast residual

    if cfg.use_lgpm:
        put("lgpm", _avf(K * T, D, L))

    n_tok = 4 + int(cfg.use_avam) + 2 * int(cfg.use_lgpm)
    pool = tk * T * D + D + G * tm * D + G * D
    if cfg.use_avam:
        pool += G * tm * D
    if cfg.use_lgpm:
        pool += 2 * K * T * D
    put("fusion", (0, pool + 2 * n_tok * D + 2 * D))  # token means, relu, token mean, gate, tanh
    put("fusion", _linear(1, D, D))
    put("fusion", _linear(1, D, cfg.C))
    put("fusion", (0, cfg.C))                         # softmax
    return out


def count_macs(cfg: ModelConfig) -> dict[str, int]:
    """Forward MACs per module for one sample; a closed-form function of ``cfg``."""
    return {m: parts["matmul"] + parts["elementwise"] for m, parts in mac_breakdown(cfg).items()}


def matmul_macs(cfg: ModelConfig) -> int:
    return sum(parts["matmul"] for parts in mac_breakdown(cfg).values())


def cost_report(cfg: ModelConfig, model=None, label: str = "full") -> CostReport:
    params = count_params(model) if model is not None else analytic_params(cfg)
    macs = count_macs(cfg)
    total = sum(macs.values())
    return CostReport(
        params_total=sum(params.values()),
        params_by_module=params,
        macs_total=total,
        macs_by_module=macs,
        flops_total=2 * total,
        config=cfg.to_dict(),
        label=label,
    )


def ablation_reports(cfg: ModelConfig, ablations=ABLATIONS) -> list[CostReport]:
    """Reports for the full model followed by each requested ablation."""
    reports = [cost_report(cfg)]
    for name in ablations:
        reports.append(cost_report(cfg.ablate(name), label=f"w/o {name}"))
    return reports


def module_share(cfg: ModelConfig, module: str) -> float:
    """Fraction of the full model's MACs saved by removing ``module``."""
    full = cost_report(cfg).macs_total
    return (full - cost_report(cfg.ablate(module)).macs_total) / full


def _ratio(a: int, b: int) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def compare_configs(cfg_a: ModelConfig, cfg_b: ModelConfig) -> dict:
    """Ratios ``a / b`` of parameters and MACs, per module and in total."""
    ra, rb = cost_report(cfg_a), cost_report(cfg_b)
    return {
        "params_total": _ratio(ra.params_total, rb.params_total),
        "macs_total": _ratio(ra.macs_total, rb.macs_total),
        "params_by_module": {
            m: _ratio(ra.params_by_module[m], rb.params_by_module[m]) for m in MODULES
        },
        "macs_by_module": {m: _ratio(ra.macs_by_module[m], rb.macs_by_module[m]) for m in MODULES},
    }


def format_table(reports: list[CostReport]) -> str:
    """Aligned plain-text table: one row per report, MACs in millions."""
    head = ["config", "params"] + [f"{m}" for m in MODULES] + ["MACs(M)", "FLOPs(G)"]
    rows = [head]
    for r in reports:
        rows.append(
            [r.label, f"{r.params_total / 1e6:.3f}M"]
            + [f"{r.macs_by_module[m] / 1e6:.2f}" for m in MODULES]
            + [f"{r.macs_total / 1e6:.2f}", f"{r.flops_total / 1e9:.3f}"]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
