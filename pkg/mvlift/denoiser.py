# -*- coding: utf-8 -*-
"""Transformer denoisers predicting clean 2D motion.

`LineConditionedDenoiser` reads one view's noisy sequence together with its
epipolar lines. `MultiViewDenoiser` reads a clean conditioning view plus noisy
views and adds cross-view attention after each temporal self-attention.
Both use one token per frame and predict x0 directly.
"""
import logging
import math
from dataclasses import dataclass, fields

import torch
from torch import nn

from mvlift.base import DTYPE, InvalidArgumentError, as_tensor, make_generator

logger = logging.getLogger(__name__)

KIND_LCDM = 'lcdm'
"""String: Line-conditioned single-view denoiser"""

KIND_MVDM = 'mvdm'
"""String: Multi-view denoiser with cross-view attention"""


@dataclass
class DenoiserConfig(object):
    """Network sizes.

    `view_count` is 1 for the line-conditioned model. `self_attention` can be
    switched off to isolate the cross-view path when inspecting the multi-view model.
    """
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_T: int = 64
    joint_count: int = 8
    view_count: int = 1
    n_steps: int = 100
    ff_mult: int = 4
    self_attention: bool = True

    def __post_init__(self):
        for name in ('d_model', 'n_layers', 'n_heads', 'max_T', 'joint_count', 'view_count', 'n_steps', 'ff_mult'):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError("{} must be at least 1, got {}".format(name, getattr(self, name)))
        if self.d_model % self.n_heads:
            raise InvalidArgumentError("d_model {} is not divisible by n_heads {}".format(self.d_model, self.n_heads))


def config_from_dict(values):
    known = {f.name for f in fields(DenoiserConfig)}
    return DenoiserConfig(**{k: v for k, v in values.items() if k in known})


class SinusoidalPositionalEncoding(nn.Module):
    """Fixed sine/cosine table added to frame tokens."""

    def __init__(self, d_model, max_len):
        super(SinusoidalPositionalEncoding, self).__init__()
        position = torch.arange(max_len, dtype=DTYPE).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
        table = torch.zeros(max_len, d_model, dtype=DTYPE)
        table[:, 0::2] = torch.sin(position * div_term)
        table[:, 1::2] = torch.cos(position * div_term)[:, :d_model // 2]
        self.register_buffer('table', table)

    def forward(self, T):
        return self.table[:T]


def _feed_forward(d_model, mult):
    return nn.Sequential(nn.Linear(d_model, d_model * mult), nn.GELU(), nn.Linear(d_model * mult, d_model))


class TemporalBlock(nn.Module):
    """Pre-norm residual block: self-attention over frames, then feed-forward."""

    def __init__(self, d_model, n_heads, ff_mult):
        super(TemporalBlock, self).__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=0.0, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = _feed_forward(d_model, ff_mult)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class MultiViewBlock(nn.Module):
    """Self-attention within each view, cross-view attention per frame, feed-forward."""

    def __init__(self, d_model, n_heads, ff_mult, self_attention=True):
        super(MultiViewBlock, self).__init__()
        self.self_attention = self_attention
        if self_attention:
            self.norm1 = nn.LayerNorm(d_model)
            self.attn = nn.MultiheadAttention(d_model, n_heads, dropout=0.0, batch_first=True)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(d_model, n_heads, dropout=0.0, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = _feed_forward(d_model, ff_mult)

    def forward(self, x):
        B, V, T, D = x.shape
        if self.self_attention:
            flat = x.reshape(B * V, T, D)
            h = self.norm1(flat)
            x = (flat + self.attn(h, h, h, need_weights=False)[0]).reshape(B, V, T, D)
        across = x.permute(0, 2, 1, 3).reshape(B * T, V, D)
        h = self.norm_cross(across)
        across = across + self.cross_attn(h, h, h, need_weights=False)[0]
        x = across.reshape(B, T, V, D).permute(0, 2, 1, 3)
        return x + self.mlp(self.norm2(x))


def _steps_tensor(n, batch, n_steps):
    steps = torch.as_tensor(n, dtype=torch.long)
    if steps.numel() and (int(steps.min()) < 0 or int(steps.max()) > n_steps):
        raise InvalidArgumentError("diffusion step {} outside 0..{}".format(n, n_steps))
    if steps.dim() == 0:
        steps = steps.expand(batch)
    if steps.shape != (batch,):
        raise InvalidArgumentError("expected one diffusion step per batch entry, got shape {}".format(tuple(steps.shape)))
    return steps


def line_offsets(points, L):
    """Perpendicular offset (a, b) * (a x + b y + c) of each point from its normalized line."""
    signed = L[..., 0] * points[..., 0] + L[..., 1] * points[..., 1] + L[..., 2]
    return L[..., :2] * signed.unsqueeze(-1)


class LineConditionedDenoiser(nn.Module):
    """Stage-1 network: (noisy 2D frame, its epipolar lines) tokens -> clean 2D frames.

    Each frame token also carries every joint's offset from its line, so
    subtracting it moves the joint onto the line.
    """

    kind = KIND_LCDM

    def __init__(self, config):
        super(LineConditionedDenoiser, self).__init__()
        self.config = config
        J, d = config.joint_count, config.d_model
        self.input_proj = nn.Linear(J * 2 + J * 3 + J * 2, d)
        self.step_embedding = nn.Embedding(config.n_steps + 1, d)
        self.positional = SinusoidalPositionalEncoding(d, config.max_T)
        self.blocks = nn.ModuleList([TemporalBlock(d, config.n_heads, config.ff_mult) for _ in range(config.n_layers)])
        self.norm_out = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, J * 2)
        self.to(DTYPE)

    def forward(self, x_n, n, L):
        """Predict x0.

        Parameters
        ----------
        x_n : tensor (T, J, 2) or (B, T, J, 2)
        n : int or tensor (B,)
        L : tensor (T, J, 3) or (B, T, J, 3)

        Returns
        -------
        tensor shaped like `x_n`
        """
        x_n = as_tensor(x_n)
        L = as_tensor(L)
        single = x_n.dim() == 3
        if single:
            x_n, L = x_n.unsqueeze(0), L.unsqueeze(0)
        J = self.config.joint_count
        if x_n.dim() != 4 or x_n.shape[2:] != (J, 2) or L.shape != x_n.shape[:3] + (3,):
            raise InvalidArgumentError("expected (B, T, {0}, 2) poses and (B, T, {0}, 3) lines, got {1} and {2}"
                                       .format(J, tuple(x_n.shape), tuple(L.shape)))
        B, T = x_n.shape[:2]
        if not 1 <= T <= self.config.max_T:
            raise InvalidArgumentError("sequence length {} outside 1..{}".format(T, self.config.max_T))
        steps = _steps_tensor(n, B, self.config.n_steps)
        tokens = torch.cat([x_n.reshape(B, T, J * 2), L.reshape(B, T, J * 3),
                            line_offsets(x_n, L).reshape(B, T, J * 2)], dim=-1)
        h = self.input_proj(tokens) + self.positional(T) + self.step_embedding(steps)[:, None, :]
        for block in self.blocks:
            h = block(h)
        out = self.output_proj(self.norm_out(h)).reshape(B, T, J, 2)
        return out[0] if single else out


class MultiViewDenoiser(nn.Module):
    """Stage-4 network: clean view-0 condition plus V-1 noisy views -> clean views 1..V-1."""

    kind = KIND_MVDM

    def __init__(self, config):
        super(MultiViewDenoiser, self).__init__()
        if config.view_count < 2:
            raise InvalidArgumentError("the multi-view denoiser needs view_count >= 2")
        self.config = config
        J, d = config.joint_count, config.d_model
        self.input_proj = nn.Linear(J * 2, d)
        self.view_embedding = nn.Embedding(config.view_count, d)
        self.step_embedding = nn.Embedding(config.n_steps + 1, d)
        self.positional = SinusoidalPositionalEncoding(d, config.max_T)
        self.blocks = nn.ModuleList([MultiViewBlock(d, config.n_heads, config.ff_mult, config.self_attention)
                                     for _ in range(config.n_layers)])
        self.norm_out = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, J * 2)
        self.to(DTYPE)

    def forward(self, x_n_views, n, x_cond):
        """Predict x0 for views 1..V-1.

        Parameters
        ----------
        x_n_views : tensor (V, T, J, 2) or (B, V, T, J, 2)
            Slot 0 is ignored; the clean condition takes its place.
        n : int or tensor (B,)
        x_cond : tensor (T, J, 2) or (B, T, J, 2)

        Returns
        -------
        tensor (V-1, T, J, 2) or (B, V-1, T, J, 2)
        """
        x_n_views = as_tensor(x_n_views)
        x_cond = as_tensor(x_cond)
        single = x_n_views.dim() == 4
        if single:
            x_n_views, x_cond = x_n_views.unsqueeze(0), x_cond.unsqueeze(0)
        J, V = self.config.joint_count, self.config.view_count
        if x_n_views.dim() != 5 or x_n_views.shape[1] != V or x_n_views.shape[3:] != (J, 2):
            raise InvalidArgumentError("expected (B, {}, T, {}, 2) views, got {}".format(V, J, tuple(x_n_views.shape)))
        B, _, T = x_n_views.shape[:3]
        if x_cond.shape != (B, T, J, 2):
            raise InvalidArgumentError("condition must have shape {}, got {}".format((B, T, J, 2), tuple(x_cond.shape)))
        if not 1 <= T <= self.config.max_T:
            raise InvalidArgumentError("sequence length {} outside 1..{}".format(T, self.config.max_T))
        steps = _steps_tensor(n, B, self.config.n_steps)
        inputs = torch.cat([x_cond.unsqueeze(1), x_n_views[:, 1:]], dim=1).reshape(B, V, T, J * 2)
        views = torch.arange(V)
        h = (self.input_proj(inputs) + self.view_embedding(views)[None, :, None, :]
             + self.positional(T)[None, None] + self.step_embedding(steps)[:, None, None, :])
        for block in self.blocks:
            h = block(h)
        out = self.output_proj(self.norm_out(h[:, 1:])).reshape(B, V - 1, T, J, 2)
        return out[0] if single else out


def build_denoiser(kind, config):
    if kind == KIND_LCDM:
        return LineConditionedDenoiser(config)
    if kind == KIND_MVDM:
        return MultiViewDenoiser(config)
    raise InvalidArgumentError("unknown denoiser kind {!r}".format(kind))


def init_params(model, seed, zero_output=False):
    """Scaled-normal initialization (std 1/sqrt(d_model)) with zero biases and unit norms.

    Parameters
    ----------
    model : LineConditionedDenoiser or MultiViewDenoiser
    seed : int or tuple
    zero_output : bool
        Zero the output projection so the network predicts 0 everywhere.

    Returns
    -------
    nn.Module
        `model`, initialized in place.
    """
    generator = make_generator(seed)
    scale = 1.0 / math.sqrt(model.config.d_model)
    norms = {id(p) for m in model.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if id(param) in norms:
                param.fill_(1.0 if name.endswith('weight') else 0.0)
            elif name.endswith('bias'):
                param.zero_()
            else:
                param.copy_(torch.randn(param.shape, generator=generator, dtype=DTYPE) * scale)
        if zero_output:
            model.output_proj.weight.zero_()
            model.output_proj.bias.zero_()
    return model


def lcd_forward(model, x_n, n, L):
    """Stage-1 forward pass: x0 prediction (T, J, 2) for a noisy sequence and its lines."""
    return model(x_n, n, L)


def mv_forward(model, x_n_views, n, x_cond):
    """Stage-4 forward pass: x0 predictions for views 1..V-1."""
    return model(x_n_views, n, x_cond)


def param_gradients(model, loss_fn):
    """Gradient of ``loss_fn(model)`` with respect to every named parameter.

    Returns
    -------
    dict
        ``name -> tensor`` matching the parameter shapes.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()
    gradients = {}
    for name, param in model.named_parameters():
        gradients[name] = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
    model.zero_grad(set_to_none=True)
    return gradients
