"""Attention renderer: per-sample tokens, occlusion-masked multi-head attention,
auto-encoder ray regularization with a density head, view-weighted color
blending with angular positional encoding, and classical volume rendering.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TOKEN_DIM = 32
N_HEADS = 4
HEAD_DIM = 8
FFN_DIM = 64
N_ATTN_LAYERS = 4
THETA_FREQS = 4


class RenderError(Exception):
    pass


def masked_softmax(scores, keep, dim=-1):
    """Softmax with excluded entries forced to exactly zero weight."""
    filled = scores.masked_fill(~keep, float("-inf"))
    return torch.softmax(filled, dim=dim)


def angular_encoding(theta, n_freqs=THETA_FREQS):
    """Sinusoidal features (sin 2^k t, cos 2^k t) for k < n_freqs."""
    outs = []
    for k in range(n_freqs):
        outs.append(torch.sin((2 ** k) * theta))
        outs.append(torch.cos((2 ** k) * theta))
    return torch.stack(outs, dim=-1)


class TokenMaker(nn.Module):
    """Linear transforms of Eq.-style inputs into view and global tokens."""

    def __init__(self):
        super().__init__()
        self.view = nn.Linear(32, TOKEN_DIM)       # [f0; phi0; phi1; phi2]
        self.globl = nn.Linear(16, TOKEN_DIM)      # [mean; var] of f0 across views

    def forward(self, f0, phi):
        """f0 (R,N,V,8), phi (R,N,V,3,8) -> view tokens (R,N,V,32), global (R,N,32)."""
        V = f0.shape[2]
        if V < 2:
            raise RenderError("need at least 2 source views for the variance token")
        view_in = torch.cat([f0, phi.reshape(*phi.shape[:3], 24)], dim=-1)
        t_view = self.view(view_in)
        var, mean = torch.var_mean(f0, dim=2, unbiased=False)
        t_glob = self.globl(torch.cat([mean, var], dim=-1))
        return t_view, t_glob


class EncoderLayer(nn.Module):
    """Pre-norm residual attention block over the V+1 tokens of one sample."""

    def __init__(self):
        super().__init__()
        self.norm1 = nn.LayerNorm(TOKEN_DIM)
        self.qkv = nn.Linear(TOKEN_DIM, 3 * N_HEADS * HEAD_DIM, bias=False)
        self.out = nn.Linear(N_HEADS * HEAD_DIM, TOKEN_DIM, bias=False)
        self.norm2 = nn.LayerNorm(TOKEN_DIM)
        self.ff1 = nn.Linear(TOKEN_DIM, FFN_DIM)
        self.ff2 = nn.Linear(FFN_DIM, TOKEN_DIM)

    def forward(self, tokens, keep):
        """tokens (B,T,32); keep (B,T) True where the token may serve as a key."""
        B, T, _ = tokens.shape
        h = self.norm1(tokens)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, T, N_HEADS, HEAD_DIM).transpose(1, 2)
        k = k.view(B, T, N_HEADS, HEAD_DIM).transpose(1, 2)
        v = v.view(B, T, N_HEADS, HEAD_DIM).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(HEAD_DIM)
        attn = masked_softmax(scores, keep.reshape(B, 1, 1, T))
        mixed = (attn @ v).transpose(1, 2).reshape(B, T, N_HEADS * HEAD_DIM)
        tokens = tokens + self.out(mixed)
        return tokens + self.ff2(F.relu(self.ff1(self.norm2(tokens))))


class MhaStack(nn.Module):
    def __init__(self):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer() for _ in range(N_ATTN_LAYERS))

    def forward(self, t_view, t_glob, mask):
        """Refine tokens; masked views never contribute as keys, the global token
        is always a key. Global token sits at index 0."""
        R, N, V, _ = t_view.shape
        tokens = torch.cat([t_glob.unsqueeze(2), t_view], dim=2).reshape(R * N, V + 1, TOKEN_DIM)
        keep = torch.cat([torch.ones_like(mask[..., :1]), mask], dim=-1)
        keep = keep.reshape(R * N, V + 1) > 0
        for layer in self.layers:
            tokens = layer(tokens, keep)
        tokens = tokens.reshape(R, N, V + 1, TOKEN_DIM)
        return tokens[:, :, 1:], tokens[:, :, 0]


class LnELUConv1d(nn.Module):
    """Conv1d + layer normalization over the ray axis + ELU (affine-free norm,
    so the module is agnostic to the per-ray sample count)."""

    def __init__(self, cin, cout, transposed=False):
        super().__init__()
        if transposed:
            self.conv = nn.ConvTranspose1d(cin, cout, 4, stride=2, padding=1)
        else:
            self.conv = nn.Conv1d(cin, cout, 3, stride=1, padding=1)

    def forward(self, x):
        x = self.conv(x)
        return F.elu(F.layer_norm(x, x.shape[-1:]))


class ConvAutoEncoder(nn.Module):
    """1D auto-encoder along the ray with three poolings and skip concatenations."""

    def __init__(self):
        super().__init__()
        self.enc1 = LnELUConv1d(32, 64)
        self.enc2 = LnELUConv1d(64, 128)
        self.enc3 = LnELUConv1d(128, 128)
        self.pool = nn.MaxPool1d(2)
        self.dec1 = LnELUConv1d(128, 128, transposed=True)
        self.dec2 = LnELUConv1d(256, 64, transposed=True)
        self.dec3 = LnELUConv1d(128, 32, transposed=True)
        self.out = LnELUConv1d(64, 32)

    def forward(self, x):
        """x (R, 32, N) with N divisible by 8 -> (R, 32, N)."""
        if x.shape[-1] % 8:
            raise RenderError(f"ray sample count {x.shape[-1]} not divisible by 8")
        c1 = self.pool(self.enc1(x))
        c2 = self.pool(self.enc2(c1))
        c3 = self.pool(self.enc3(c2))
        y = self.dec1(c3)
        y = self.dec2(torch.cat([c2, y], dim=1))
        y = self.dec3(torch.cat([c1, y], dim=1))
        return self.out(torch.cat([x, y], dim=1))


class DensityHead(nn.Module):
    """AE ray regularization followed by a two-layer perceptron with softplus."""

    def __init__(self):
        super().__init__()
        self.ae = ConvAutoEncoder()
        self.fc1 = nn.Linear(TOKEN_DIM, 32)
        self.fc2 = nn.Linear(32, 1)

    def forward(self, t_glob):
        """t_glob (R, N, 32) -> densities (R, N) >= 0."""
        h = self.ae(t_glob.transpose(1, 2)).transpose(1, 2)
        return F.softplus(self.fc2(F.elu(self.fc1(h)))).squeeze(-1)


class ColorHead(nn.Module):
    """Per-view blending weights from refined tokens and encoded angles."""

    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(TOKEN_DIM + 2 * THETA_FREQS, 32)
        self.fc2 = nn.Linear(32, 1)

    def forward(self, t_view, theta, mask, colors):
        """t_view (R,N,V,32), theta/mask (R,N,V), colors (R,N,V,3) -> blended (R,N,3)."""
        if not bool(mask.sum(dim=-1).min() > 0):
            raise RenderError("color blending needs at least one unmasked view per sample")
        enc = angular_encoding(theta)
        logits = self.fc2(F.elu(self.fc1(torch.cat([t_view, enc], dim=-1)))).squeeze(-1)
        w = masked_softmax(logits, mask > 0)
        return (w.unsqueeze(-1) * colors).sum(dim=2), w


def volume_render(sigma, values, z=None, delta_weighted=False):
    """Classical compositing with unit inter-sample spacing.

    weights_n = exp(-sum_{k<n} sigma_k) * (1 - exp(-sigma_n)). The optional
    ``delta_weighted`` mode multiplies densities by inter-sample distances
    (needs ``z``); default off.
    """
    if delta_weighted:
        if z is None:
            raise RenderError("delta weighting needs sample depths")
        delta = torch.cat([z[:, 1:] - z[:, :-1], (z[:, -1] - z[:, -2]).unsqueeze(1)], dim=1)
        sigma = sigma * delta
    acc = torch.cumsum(sigma, dim=1)
    transmittance = torch.exp(-(acc - sigma))       # exp(-sum_{k<n} sigma_k)
    weights = transmittance * (1.0 - torch.exp(-sigma))
    rendered = (weights.unsqueeze(-1) * values).sum(dim=1)
    return rendered, weights


def render_depth(weights, z):
    """Expected ray depth under the rendering weights."""
    return (weights * z).sum(dim=1)


@dataclass
class RenderOutput:
    sigma: torch.Tensor      # (R, N)
    c_n: torch.Tensor        # (R, N, 3) blended per-sample colors
    c_hat: torch.Tensor      # (R, 3)
    d_hat: torch.Tensor      # (R,)
    weights: torch.Tensor    # (R, N)
    blend: torch.Tensor      # (R, N, V) color blending weights


class RendererNet(nn.Module):
    """Token construction through volume rendering for a batch of rays."""

    def __init__(self, delta_weighted=False):
        super().__init__()
        self.tokens = TokenMaker()
        self.mha = MhaStack()
        self.density = DensityHead()
        self.color = ColorHead()
        self.delta_weighted = delta_weighted

    def forward(self, batch):
        t_view, t_glob = self.tokens(batch.f0, batch.phi)
        t_view, t_glob = self.mha(t_view, t_glob, batch.mask)
        sigma = self.density(t_glob)
        c_n, blend = self.color(t_view, batch.theta, batch.color_mask, batch.color)
        c_hat, weights = volume_render(sigma, c_n, batch.z, self.delta_weighted)
        d_hat = render_depth(weights, batch.z)
        return RenderOutput(sigma, c_n, c_hat, d_hat, weights, blend)
