from rseq.numerics.gradcheck import finite_diff_grad, relative_error
from rseq.numerics.rng import Rng
from rseq.numerics.tensor import (
    BACKWARD_RULES,
    Tensor,
    TapeNode,
    add,
    as_tensor,
    backward,
    clear_tape,
    concat,
    cross_entropy,
    div,
    dropout,
    embedding,
    exp,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    pad_rows,
    parameter,
    precision,
    precision_name,
    record,
    backward_rule,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softmax_rows,
    stack,
    sub,
    tanh,
    tape_size,
    transpose,
    tsum,
    zeros,
)

__all__ = [name for name in dir() if not name.startswith("_")]
