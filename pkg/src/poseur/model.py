"""Full network: backbone, coarse head, keypoint encoder, query decoder, flows."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, CoarseProposal
from .decoder import DecoderConfig, DecoderOutput, QueryDecoder
from .encoder import KeypointEncoder
from .errors import ConfigurationError
from .likelihood import MODES, FlowModel, LaplaceParams, total_loss
from .nn import Linear, Module


@dataclass
class ModelConfig:
    input_size: tuple = (64, 64)
    num_keypoints: int = 8
    channels: list = field(default_factory=lambda: [16, 32])
    strides: list = field(default_factory=lambda: [8, 16])
    embed_dim: int = 32
    decoder_layers: int = 2
    heads: int = 4
    points: int = 4
    decoder_levels: int | None = None  # use the last N pyramid levels; None = all
    ffn_dim: int | None = None
    mode: str = "flow"
    flow_depth: int = 4
    flow_hidden: int = 16
    noisy_references: bool = True
    aux_loss: bool = True
    lam: float = 1.0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        L = len(self.strides)
        if self.decoder_levels is None:
            self.decoder_levels = L
        if not 1 <= self.decoder_levels <= L:
            raise ConfigurationError(f"decoder_levels must be in [1, {L}]")
        if self.embed_dim % 4:
            raise ConfigurationError(f"embed_dim must be divisible by 4, got {self.embed_dim}")
        self.backbone_config()
        self.decoder_config()

    def backbone_config(self):
        return BackboneConfig(self.input_size, self.channels, self.strides, self.num_keypoints, self.embed_dim)

    def decoder_config(self):
        return DecoderConfig(
            self.decoder_layers, self.heads, self.points, self.decoder_levels, self.embed_dim, self.ffn_dim
        )


@dataclass
class ModelOutput:
    proposal: CoarseProposal
    decoder: DecoderOutput
    num_keypoints: int

    @property
    def coarse(self) -> LaplaceParams:
        return LaplaceParams(self.proposal.mu, self.proposal.b)

    @property
    def final(self) -> LaplaceParams:
        """Final-layer prediction restricted to the proposal query group."""
        K = self.num_keypoints
        last = self.decoder.final
        return LaplaceParams(last.mu[:, :K], last.b[:, :K])


class PoseurModel(Module):
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        bcfg = config.backbone_config()
        self.backbone = Backbone(bcfg, rng)
        used = bcfg.channels[-config.decoder_levels :]
        self.level_proj = [Linear(c, config.embed_dim, rng) for c in used]
        self.encoder = KeypointEncoder(config.num_keypoints, config.embed_dim, rng)
        self.decoder = QueryDecoder(config.decoder_config(), rng)
        self.flow_coarse = FlowModel(rng, config.flow_depth, config.flow_hidden)
        self.flow_decoder = FlowModel(rng, config.flow_depth, config.flow_hidden)

    def project_levels(self, pyramid):
        """Flatten the used levels to ``[B, H*W, C]`` and map channels to the embedding width."""
        out = []
        for level, proj in zip(pyramid.levels[-self.config.decoder_levels :], self.level_proj):
            B, C, H, W = level.shape
            values = proj(level.transpose(0, 2, 3, 1).reshape(B, H * W, C))
            out.append((values, (H, W)))
        return out

    def forward(self, images, noisy_seed=None, proposal_override=None):
        """Run the network on ``[B, 3, H, W]`` patches.

        ``noisy_seed`` adds the noisy query group (training only).
        ``proposal_override`` replaces the coarse locations fed to the
        encoder, e.g. to study corrupted proposals.
        """
        pyramid = self.backbone.extract_pyramid(images)
        proposal = self.backbone.coarse_proposal(pyramid.pooled)
        mu = proposal.mu if proposal_override is None else proposal_override
        query_set = self.encoder(mu, noisy_seed if self.config.noisy_references else None)
        dec = self.decoder(query_set, self.project_levels(pyramid))
        return ModelOutput(proposal, dec, self.config.num_keypoints)

    __call__ = forward

    def loss(self, output: ModelOutput, target):
        cfg = self.config
        preds = output.decoder.predictions if cfg.aux_loss else output.decoder.predictions[-1:]
        return total_loss(output.coarse, preds, target, self.flow_coarse, self.flow_decoder, cfg.lam, cfg.mode)

    def decoder_parameters(self):
        """Parameters that only receive gradient through the decoder loss term."""
        names = ("level_proj", "encoder", "decoder", "flow_decoder")
        return [p for n, p in self.named_parameters() if n.split(".")[0] in names]
