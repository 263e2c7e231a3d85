"""Temporal fusion of an aligned stack and spatial fusion of the colour-plane streams."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import DimensionError
from ..raw import unpack_array


def lrelu(x):
    return F.leaky_relu(x, 0.1)


def similarity(embedded, embedded_center):
    """Per-position sigmoid of the channel-axis dot product: (N, C, H, W) -> (N, 1, H, W)."""
    return torch.sigmoid((embedded * embedded_center).sum(dim=1, keepdim=True))


class TemporalFusion(nn.Module):
    """Similarity-weights every slice against the centre, aggregates, then gates spatially.

    The spatial gate is a two-level pyramid mask (full and half resolution).
    """

    def __init__(self, channels=16, frames=3):
        super().__init__()
        self.frames = frames
        self.center = frames // 2
        self.embed = nn.Conv2d(channels, channels, 3, padding=1)
        self.embed_center = nn.Conv2d(channels, channels, 3, padding=1)
        self.aggregate = nn.Conv2d(frames * channels, channels, 1)
        self.att1 = nn.Conv2d(frames * channels, channels, 1)
        self.att2 = nn.Conv2d(2 * channels, channels, 1)
        self.att_l2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.att3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.att_out = nn.Conv2d(channels, channels, 1)

    def weights(self, stack):
        """Similarity maps S for every slice, (B, T, 1, H, W)."""
        b, t, c, h, w = stack.shape
        emb = self.embed(stack.flatten(0, 1)).view(b, t, c, h, w)
        emb_c = self.embed_center(stack[:, self.center])
        return torch.stack([similarity(emb[:, i], emb_c) for i in range(t)], dim=1)

    def forward(self, stack):
        if stack.dim() != 5 or stack.shape[1] != self.frames:
            raise DimensionError(f"expected (B, {self.frames}, C, H, W), got {tuple(stack.shape)}")
        weighted = (stack * self.weights(stack)).flatten(1, 2)
        fused = lrelu(self.aggregate(weighted))

        att = lrelu(self.att1(weighted))
        pooled = torch.cat([F.max_pool2d(att, 3, 2, 1), F.avg_pool2d(att, 3, 2, 1)], dim=1)
        coarse = lrelu(self.att_l2(lrelu(self.att2(pooled))))
        coarse = F.interpolate(coarse, size=att.shape[-2:], mode="bilinear", align_corners=False)
        mask = torch.sigmoid(self.att_out(lrelu(self.att3(att + coarse))))
        return fused * mask * 2


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, a=0.1)
            conv.weight.data *= 0.1
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class CBAM(nn.Module):
    """Channel gate from a pooled MLP, then spatial gate from a 7x7 conv over pooled maps."""

    def __init__(self, channels, reduction=4, kernel_size=7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        gate = torch.sigmoid(self.mlp(x.mean(dim=(2, 3))) + self.mlp(x.amax(dim=(2, 3))))
        x = x * gate[:, :, None, None]
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.spatial(pooled))


class SpatialFusion(nn.Module):
    """Joins the stream features and predicts a residual noise map."""

    def __init__(self, in_channels=64, out_channels=4, blocks=10, cbam_reduction=4):
        super().__init__()
        width = in_channels
        self.conv_in = nn.Conv2d(in_channels, width, 3, padding=1)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(blocks)])
        self.cbam = CBAM(width, cbam_reduction)
        self.conv_out = nn.Conv2d(width, out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, features):
        return self.conv_out(self.cbam(self.blocks(lrelu(self.conv_in(features)))))


def spatial_fuse(plane_features, center_noisy, module: SpatialFusion, pattern="RGGB"):
    """Four (B, C, H, W) plane features and the (B, 2H, 2W) noisy centre -> denoised raw."""
    if len(plane_features) != 4:
        raise DimensionError(f"need four plane feature maps, got {len(plane_features)}")
    h, w = plane_features[0].shape[-2:]
    if any(f.shape != plane_features[0].shape for f in plane_features) or \
            tuple(center_noisy.shape[-2:]) != (2 * h, 2 * w):
        raise DimensionError("plane features and noisy frame dimensions disagree")
    noise = module(torch.cat(list(plane_features), dim=1))
    return center_noisy + unpack_array(noise, pattern)
