import os

import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(max(1, os.cpu_count() or 1))

settings.register_profile(
    "desk",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("desk")
