from fedul_sim.sampling.optimal import (
    P_FLOOR,
    SamplingPlan,
    compute_probabilities,
    draw_sample,
    ip_aggregate,
    uniform_probabilities,
    variance_bound,
)

__all__ = [
    "P_FLOOR",
    "SamplingPlan",
    "compute_probabilities",
    "draw_sample",
    "ip_aggregate",
    "uniform_probabilities",
    "variance_bound",
]
