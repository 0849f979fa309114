"""Finite-difference gradient check of the full model, reported per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

from rseq import numerics as nx
from rseq.layers import CELL_GATES
from rseq.model import ModelConfig, RTransformerModel, cross_entropy_loss
from rseq.numerics import Rng

TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    worst: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def offenders(self) -> dict[str, float]:
        return {g: e for g, e in self.worst.items() if not e < self.tolerance}

    @property
    def passed(self) -> bool:
        return not self.offenders

    def lines(self) -> list[str]:
        return [f"group={g} worst_rel_err={e:.3e} {'ok' if e < self.tolerance else 'FAIL'}"
                for g, e in self.worst.items()]


def group_of(param_name: str) -> str:
    # "layers.3.attn.w_q" -> "attn.w_q"; model-level names stay as they are
    parts = param_name.split(".")
    return ".".join(parts[2:]) if parts[0] == "layers" else param_name


def check_model_gradients(config: ModelConfig, seed: int, seq_len: int = 5, batch_size: int = 2,
                          coords_per_tensor: int = 8, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error per parameter group for one seeded model and batch (double precision)."""
    rng = Rng(seed)
    with nx.precision("f64"):
        model = RTransformerModel(config, rng)
        if config.vocab_size:
            inputs = rng.integers(0, config.vocab_size, (batch_size, seq_len))
        else:
            inputs = rng.normal((batch_size, seq_len, config.input_dim))
        n_out = config.output_size
        shape = (batch_size, seq_len) if config.task_kind == "next_step" else (batch_size,)
        targets = rng.integers(0, n_out, shape)

        def loss_fn(_=None):
            return cross_entropy_loss(model(inputs, training=False), targets)

        loss = loss_fn()
        nx.backward(loss)
        worst: dict[str, float] = {}
        for name, p in model.named_parameters():
            coords = rng.permutation(p.size)[:coords_per_tensor]
            numeric = nx.finite_diff_grad(loss_fn, p, step, coords=coords).data.reshape(-1)[coords]
            analytic = p.grad.reshape(-1)[coords]
            err = nx.relative_error(analytic, numeric)
            g = group_of(name)
            worst[g] = max(worst.get(g, 0.0), err)
            p.grad = None
    return worst


def run_gradcheck(num_layers: int = 2, d_model: int = 16, window: int = 3, num_heads: int = 2,
                  seq_len: int = 5, seeds=range(10), cell_kinds=tuple(CELL_GATES),
                  vocab_size: int = 7, d_ff: int = 32, tolerance: float = TOLERANCE) -> GradcheckReport:
    report = GradcheckReport(tolerance=tolerance)
    for kind in cell_kinds:
        cfg = ModelConfig(num_layers=num_layers, d_model=d_model, num_heads=num_heads, d_ff=d_ff,
                          window=window, cell_kind=kind, vocab_size=vocab_size)
        for seed in seeds:
            for g, e in check_model_gradients(cfg, seed, seq_len).items():
                report.worst[g] = max(report.worst.get(g, 0.0), e)
    return report


def corrupt_rule(op: str, scale: float = 1.5):
    """Return a backward rule for ``op`` whose gradients are off by ``scale`` (a negative control)."""
    good = nx.BACKWARD_RULES[op]

    def bad(g, node):
        return tuple(None if gi is None else gi * scale for gi in good(g, node))

    return bad

