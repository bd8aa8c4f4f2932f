"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np
import torch

from vctransfer.data import make_batch
from vctransfer.schedule import make_schedule
from vctransfer.trainer import stack_batches


def group_of(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[1].isdigit() else parts[0]


def loss_closure(model, clip, seed=0, batch=2, prompt=None):
    rng = np.random.default_rng(seed)
    sched = make_schedule(1000)
    batches = [make_batch(clip, "finetune", int(rng.integers(1, 1001)), rng, sched, flow_sigma=0.1, prompt=prompt)
               for _ in range(batch)]
    z_t, t, fg, bg, flow, eps = stack_batches(batches, dtype=torch.float64)
    prompts = [b.prompt for b in batches]

    def loss():
        pred = model(z_t, t, model.embed_text(prompts), fg, bg, flow)
        return ((pred - eps) ** 2).mean()
    return loss


def gradient_check(model, loss, n_params=24, seed=0, h=1e-6, min_grad=1e-6):
    """Central differences on randomly chosen scalars, at least one per parameter group.

    Returns a list of ``(name, index, analytic, numeric, rel_err)``.
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss().backward()
    params = dict(model.named_parameters())
    by_group: dict[str, list[tuple[str, tuple]]] = {}
    for name, p in params.items():
        g = p.grad.detach().numpy() if p.grad is not None else np.zeros(p.shape)
        for idx in zip(*np.nonzero(np.abs(g) > min_grad)):
            by_group.setdefault(group_of(name), []).append((name, tuple(int(i) for i in idx)))
    picks = [cands[int(rng.integers(len(cands)))] for cands in by_group.values()]
    pool = [c for cands in by_group.values() for c in cands]
    while len(picks) < n_params:
        picks.append(pool[int(rng.integers(len(pool)))])
    out = []
    with torch.no_grad():
        for name, idx in picks:
            p = params[name]
            analytic = float(p.grad[idx])
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            out.append((name, idx, analytic, numeric, rel))
    return out, set(by_group), {group_of(n) for n in params}


def randomize_zero_init(model, seed=0, std=0.02):
    """Move off the zero-initialised point so every group carries gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if not torch.any(p != 0):
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
