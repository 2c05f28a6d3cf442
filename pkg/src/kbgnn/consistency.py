"""Memory-bank consistency learning between the geographical and sequential views."""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class MemoryBank:
    """Fixed-capacity FIFO of detached ``(e_g, e_s)`` anchor pairs.

    Slot ``m`` of both views always comes from the same sequence.
    """

    def __init__(self, capacity=2048, dim=64, dtype=torch.float32):
        self.capacity = capacity
        self.dim = dim
        self._g = torch.zeros(capacity, dim, dtype=dtype)
        self._s = torch.zeros(capacity, dim, dtype=dtype)
        self.size = 0
        self.cursor = 0  # next slot to overwrite

    def __len__(self):
        return self.size

    def push(self, e_g, e_s):
        e_g = torch.as_tensor(e_g).detach().reshape(-1, self.dim)
        e_s = torch.as_tensor(e_s).detach().reshape(-1, self.dim)
        if e_g.shape != e_s.shape:
            raise ValueError("paired anchors must have equal shapes")
        if len(e_g) > self.capacity:
            e_g, e_s = e_g[-self.capacity:], e_s[-self.capacity:]
        k = len(e_g)
        slots = (self.cursor + torch.arange(k)) % self.capacity
        self._g[slots] = e_g.to(self._g.dtype)
        self._s[slots] = e_s.to(self._s.dtype)
        self.cursor = (self.cursor + k) % self.capacity
        self.size = min(self.capacity, self.size + k)
        return self

    def anchors(self):
        """``(g, s)`` anchors oldest first."""
        if self.size < self.capacity:
            return self._g[:self.size].clone(), self._s[:self.size].clone()
        order = (self.cursor + torch.arange(self.capacity)) % self.capacity
        return self._g[order], self._s[order]


def bank_push(bank: MemoryBank, batch):
    """Push a list of ``(e_g, e_s)`` pairs."""
    if len(batch):
        bank.push(torch.stack([torch.as_tensor(g) for g, _ in batch]),
                  torch.stack([torch.as_tensor(s) for _, s in batch]))
    return bank


def _normalize(x):
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < NORM_EPS).any()):
        logger.warning("near-zero embedding norm in consistency loss (dead embedding?)")
    return x / norms.clamp_min(NORM_EPS)


def similarity_logits(e, anchors, tau=0.5):
    return _normalize(e) @ _normalize(anchors).T / tau


def similarity_distribution(e, anchors, tau=0.5):
    """Softmax over anchors of cos(e, a_m) / tau."""
    e = torch.as_tensor(e)
    anchors = torch.as_tensor(anchors)
    squeeze = e.dim() == 1
    p = torch.softmax(similarity_logits(e.reshape(-1, e.shape[-1]), anchors, tau), dim=-1)
    return p[0] if squeeze else p


def symmetric_kl(p, q):
    """0.5 (KL(p||q) + KL(q||p)) along the last axis."""
    p, q = torch.as_tensor(p), torch.as_tensor(q)
    return 0.5 * ((p - q) * (torch.log(p) - torch.log(q))).sum(-1)


def consistency_loss(e_g, e_s, bank: MemoryBank, tau=0.5, warmup=256):
    """Mean symmetric KL between per-row anchor distributions of the two views.

    Returns ``(loss, active)``; below ``warmup`` anchors the loss is exactly 0.
    """
    if len(bank) < max(warmup, 2):
        return e_g.new_zeros(()), False
    a_g, a_s = bank.anchors()
    log_pg = torch.log_softmax(similarity_logits(e_g, a_g.to(e_g.dtype), tau), dim=-1)
    log_ps = torch.log_softmax(similarity_logits(e_s, a_s.to(e_s.dtype), tau), dim=-1)
    per_row = 0.5 * ((log_ps.exp() - log_pg.exp()) * (log_ps - log_pg)).sum(-1)
    return per_row.mean(), True


def infonce_loss(e_g, e_s, tau=0.5):
    """Symmetric in-batch InfoNCE aligning row i of both views."""
    logits = _normalize(e_g) @ _normalize(e_s).T / tau
    target = torch.arange(len(e_g), device=e_g.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def mse_loss(e_g, e_s):
    """Mean squared distance between L2-normalized views."""
    return ((_normalize(e_g) - _normalize(e_s)) ** 2).sum(-1).mean()
