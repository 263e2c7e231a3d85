"""Separated non-local attention over an aligned (B, T, C, H, W) feature stack.

Spatial (criss-cross) and channel branches run per frame slice, the temporal
branch across slices. Each branch ends in a zero-initialized 1x1 projection so
the whole module starts as the identity.
"""
import torch
import torch.nn as nn

from ..errors import DimensionError


def _zero_conv(channels):
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _criss_cross_weights(q, k):
    # (B, H, W, H + W): column block then row block; the column entry for the
    # position itself is masked to zero so it is counted once, in the row block
    h = q.shape[2]
    e_col = torch.einsum("bchw,bcgw->bhwg", q, k)
    e_row = torch.einsum("bchw,bchv->bhwv", q, k)
    self_mask = torch.eye(h, dtype=torch.bool, device=q.device).view(1, h, 1, h)
    e_col = e_col.masked_fill(self_mask, float("-inf"))
    return torch.softmax(torch.cat([e_col, e_row], dim=-1), dim=-1)


def criss_cross_affinity(q, k):
    """Softmax weights over each position's H + W - 1 criss-cross candidates.

    Returns (B, H, W, H + W - 1): first the other H - 1 rows of the column, top
    to bottom, then the W positions of the row, left to right.
    """
    b, _, h, w = q.shape
    att = _criss_cross_weights(q, k)
    keep = ~torch.eye(h, dtype=torch.bool, device=q.device).view(1, h, 1, h).expand(b, h, w, h)
    col = att[..., :h][keep].view(b, h, w, h - 1)
    return torch.cat([col, att[..., h:]], dim=-1)


def criss_cross_aggregate(weights, v):
    h = v.shape[2]
    return (torch.einsum("bhwg,bcgw->bchw", weights[..., :h], v)
            + torch.einsum("bhwv,bchv->bchw", weights[..., h:], v))


class CrissCrossAttention(nn.Module):
    def __init__(self, channels, reduction=2, recurrence=1):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.recurrence = recurrence
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.proj = _zero_conv(channels)

    def attend(self, x):
        weights = _criss_cross_weights(self.query(x), self.key(x))
        return criss_cross_aggregate(weights, self.value(x))

    def forward(self, x):
        h = x
        for _ in range(self.recurrence):
            h = self.attend(h)
        return self.proj(h)


def channel_affinity(x):
    """(B, C, H, W) -> (B, C, C) softmax over source channels of flattened dot products."""
    flat = x.flatten(2)
    return torch.softmax(flat @ flat.transpose(1, 2), dim=-1)


class ChannelAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.proj = _zero_conv(channels)

    def attend(self, x):
        att = channel_affinity(x)
        return (att @ x.flatten(2)).view_as(x), att

    def forward(self, x):
        return self.proj(self.attend(x)[0])


def temporal_affinity(stack):
    """(B, T, C, H, W) -> (B, T, T) softmax over source frames."""
    flat = stack.flatten(2)
    return torch.softmax(flat @ flat.transpose(1, 2), dim=-1)


class TemporalAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.proj = _zero_conv(channels)

    def attend(self, stack):
        att = temporal_affinity(stack)
        return (att @ stack.flatten(2)).view_as(stack), att

    def forward(self, stack):
        out, _ = self.attend(stack)
        return self.proj(out.flatten(0, 1)).view_as(stack)


def nonlocal_fuse(stack, spatial, channel, temporal):
    """Residual element-wise sum of the input and the three branch outputs."""
    for name, branch in (("spatial", spatial), ("channel", channel), ("temporal", temporal)):
        if branch.shape != stack.shape:
            raise DimensionError(f"{name} branch shape {tuple(branch.shape)} != {tuple(stack.shape)}")
    return stack + spatial + channel + temporal


class NonLocalAttention(nn.Module):
    def __init__(self, channels=16, reduction=2, recurrence=1, enabled=True):
        super().__init__()
        self.enabled = enabled
        self.spatial = CrissCrossAttention(channels, reduction, recurrence)
        self.channel = ChannelAttention(channels)
        self.temporal = TemporalAttention(channels)

    def branches(self, stack):
        if stack.dim() != 5:
            raise DimensionError(f"expected (B, T, C, H, W), got {tuple(stack.shape)}")
        slices = stack.flatten(0, 1)
        spatial = self.spatial(slices).view_as(stack)
        channel = self.channel(slices).view_as(stack)
        return spatial, channel, self.temporal(stack)

    def forward(self, stack):
        if not self.enabled:
            return stack
        return nonlocal_fuse(stack, *self.branches(stack))
