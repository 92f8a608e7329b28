"""Query/key capture on the reconstruction branch and replay on the editing branch."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import CacheMissError, ContractError
from .videoio import read_tensor, write_tensor


class AttentionCache:
    """Write-once store of (Q, K) per (block, schedule step).

    Steps are schedule indices, never float times. Tensors are kept in
    float32. After :meth:`lock` any write raises.
    """

    def __init__(self):
        self._entries = {}
        self.locked = False
        self.reads = Counter()
        self.writes = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def keys(self):
        return sorted(self._entries)

    def put(self, block, step, q, k):
        key = (int(block), int(step))
        if self.locked:
            raise ContractError(f"cache is locked; refusing write to {key}")
        if key in self._entries:
            raise ContractError(f"cache key {key} written twice")
        self._entries[key] = (q.detach().to(torch.float32).clone(), k.detach().to(torch.float32).clone())
        self.writes += 1

    def get(self, block, step):
        key = (int(block), int(step))
        try:
            entry = self._entries[key]
        except KeyError:
            raise CacheMissError(f"no captured Q/K for block {key[0]}, step {key[1]}") from None
        self.reads[key] += 1
        return entry

    def drop_step(self, step):
        for key in [k for k in self._entries if k[1] == step]:
            del self._entries[key]

    def lock(self):
        self.locked = True

    def unlock(self):
        self.locked = False

    def spill(self, dir_path):
        """Write ``<b>/<i>.ftc`` files, each stacking (Q, K), plus a manifest."""
        dir_path = Path(dir_path)
        for (b, i), (q, k) in self._entries.items():
            (dir_path / str(b)).mkdir(parents=True, exist_ok=True)
            write_tensor(torch.stack([q, k]).reshape(2, *q.shape[-3:]), dir_path / str(b) / f"{i}.ftc")
        lines = [f"entries={len(self._entries)}"] + [f"key={b},{i}" for b, i in self.keys()]
        (dir_path / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, dir_path):
        dir_path = Path(dir_path)
        cache = cls()
        for line in (dir_path / "manifest.txt").read_text().splitlines():
            if line.startswith("key="):
                b, i = (int(x) for x in line[4:].split(","))
                qk = torch.from_numpy(read_tensor(dir_path / str(b) / f"{i}.ftc"))
                cache.put(b, i, qk[0][None], qk[1][None])
        cache.lock()
        return cache


def _as_lambda(lam, dtype):
    lam = torch.as_tensor(np.asarray(lam), dtype=dtype)
    if lam.dim() != 3 or lam.shape[-1] != 1:
        raise ContractError(f"lambda must be shaped (1+n, l, 1), got {tuple(lam.shape)}")
    if torch.any(lam < 0) or torch.any(lam > 1) or not torch.all(torch.isfinite(lam)):
        raise ContractError("lambda entries must lie in [0, 1]")
    # (1+n, l, 1) -> (1, T, 1): one weight per token, shared by every head and channel
    return lam.reshape(1, -1, 1)


def vanilla_inject(q_edit, k_edit, cached):
    """Discard the editing branch's Q/K and use the captured ones."""
    q, k = cached
    if q.shape[-2:] != q_edit.shape[-2:] or k.shape[-2:] != k_edit.shape[-2:]:
        raise ContractError(f"cached Q/K {tuple(q.shape)} do not match editing Q/K {tuple(q_edit.shape)}")
    return q.to(q_edit.dtype).expand_as(q_edit).contiguous(), k.to(k_edit.dtype).expand_as(k_edit).contiguous()


def ree_inject(q_edit, k_edit, cached, lam):
    """Per-token blend: lam * captured + (1 - lam) * editing."""
    q, k = cached
    if q.shape[-2:] != q_edit.shape[-2:] or k.shape[-2:] != k_edit.shape[-2:]:
        raise ContractError(f"cached Q/K {tuple(q.shape)} do not match editing Q/K {tuple(q_edit.shape)}")
    w = lam if torch.is_tensor(lam) and lam.dim() == 3 and lam.shape[0] == 1 else _as_lambda(lam, q_edit.dtype)
    if w.shape[1] != q_edit.shape[-2]:
        raise ContractError(f"lambda covers {w.shape[1]} tokens, attention has {q_edit.shape[-2]}")
    w = w.to(q_edit.dtype)
    q_bar = w * q.to(q_edit.dtype) + (1 - w) * q_edit
    k_bar = w * k.to(k_edit.dtype) + (1 - w) * k_edit
    return q_bar.contiguous(), k_bar.contiguous()


@dataclass
class InjectionPolicy:
    kind: str = "ree"          # none | vanilla | ree
    lam: object = None         # (1+n, l, 1) weights, required for ree
    blocks: object = None      # None = every block
    steps: object = None       # None = every schedule step

    def __post_init__(self):
        if self.kind not in ("none", "vanilla", "ree"):
            raise ContractError(f"unknown injection kind {self.kind!r}")
        if self.kind == "ree":
            if self.lam is None:
                raise ContractError("ree injection needs lambda weights")
            self._lam_flat = _as_lambda(self.lam, torch.float64)

    def applies(self, block, step):
        if self.kind == "none":
            return False
        return (self.blocks is None or block in self.blocks) and (self.steps is None or step in self.steps)


class AttentionHooks:
    """Per-pass switch handed to the model: off, capture or inject.

    The sampler sets :attr:`step` to the schedule index before every velocity
    evaluation. ``audit`` (inject mode) names (block, step) keys at which the
    tokens with lambda = 0 are verified to keep the editing branch's Q/K.
    """

    def __init__(self, mode="off", cache=None, policy=None, audit=()):
        if mode not in ("off", "capture", "inject"):
            raise ContractError(f"unknown hook mode {mode!r}")
        if mode != "off" and cache is None:
            raise ContractError(f"{mode} mode needs a cache")
        if mode == "inject" and policy is None:
            raise ContractError("inject mode needs an injection policy")
        self.mode = mode
        self.cache = cache
        self.policy = policy
        self.step = None
        self.audit = set(audit)
        self.audited = []

    def apply(self, block, q, k):
        if self.mode == "off":
            return q, k
        if self.step is None:
            raise ContractError("hooks need the current schedule step")
        if self.mode == "capture":
            self.cache.put(block, self.step, q, k)
            return q, k
        if not self.cache.locked:
            raise ContractError("editing pass started before the cache was locked")
        policy = self.policy
        if policy.kind == "none":
            return q, k
        cached = self.cache.get(block, self.step)
        if not policy.applies(block, self.step):
            return q, k
        if policy.kind == "vanilla":
            return vanilla_inject(q, k, cached)
        q_bar, k_bar = ree_inject(q, k, cached, policy._lam_flat)
        if (block, self.step) in self.audit:
            free = policy._lam_flat.reshape(-1) == 0
            ok = torch.equal(q_bar[..., free, :], q[..., free, :]) and torch.equal(k_bar[..., free, :], k[..., free, :])
            if not ok:
                raise AssertionError(f"lambda=0 tokens changed at block {block}, step {self.step}")
            self.audited.append((block, self.step))
        return q_bar, k_bar


def sample_audit_keys(blocks, steps, count=5, seed=0):
    keys = [(b, i) for b in range(blocks) for i in steps]
    return set(random.Random(seed).sample(keys, min(count, len(keys))))
