"""Feature providers: the frozen generative backbone behind extraction.

Two implementations share one interface. The diffusion provider wraps a
pretrained latent-diffusion checkpoint (VAE encoder, denoising U-Net, text
encoder) and needs the optional heavy dependencies. The synthetic provider
fabricates class-structured features from seeded class directions so the whole
pipeline runs at test scale with no model downloads.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError, InvalidInputError, ProviderError
from .schedule import NoiseSchedule, scaled_linear_schedule
from .seeding import rng

DEFAULT_LAYER_IDS = ("mid_encoder", "bottleneck", "mid_decoder")

# Norm of fabricated per-sample targets. Softmaxing a vector of this norm
# over the feature dimensions gives a moderately peaked distribution;
# larger norms make the distillation targets sharper and the
# regularization correspondingly stiffer.
DEFAULT_TARGET_SCALE = 4.0

_TAG_CLASS_DIRS = 301
_TAG_TEXT = 303
_TAG_PROMPT = 304
_TAG_MIX = 305
_TAG_TEACHER = 306

# Fixed encoder gain: block means of unit-range images have a standard
# deviation of roughly 0.2, and the conventional 0.18215 latent scaling
# expects raw encoder outputs about 5.5 times larger than unit variance, so
# the product leaves gamma-scaled latents near unit variance.
_ENCODER_GAIN = 27.0


class FeatureProvider:
    """Interface: latent encoding, hooked U-Net features, text embeddings.

    Implementations are deterministic: the same inputs and construction seed
    always produce the same outputs.
    """

    provider_id: str

    def schedule(self) -> NoiseSchedule:
        raise NotImplementedError

    @property
    def text_dim(self) -> int:
        raise NotImplementedError

    def encode_latent(self, image: np.ndarray) -> np.ndarray:
        """Raw encoder output (C, h, w) for an H x W x 3 image in [0, 1]."""
        raise NotImplementedError

    def unet_features(self, noisy_latent: np.ndarray, t: int,
                      layer_ids, sample_id: int | None = None) -> dict[str, np.ndarray]:
        """Hooked activation maps {layer_id: (C_j, h_j, w_j)} at timestep t."""
        raise NotImplementedError

    def text_embed(self, prompt: str) -> np.ndarray:
        """Pooled text-encoder embedding of one prompt, shape (text_dim,)."""
        raise NotImplementedError


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _prompt_key(prompt: str) -> int:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SyntheticProvider(FeatureProvider):
    """Fabricated frozen backbone for desk-scale runs.

    Encoding is 8x average pooling of the centered image with a fixed
    orthonormal channel mix, amplified so the conventionally gamma-scaled
    latent sits near unit variance; that keeps the content visible after
    forward noising at moderate timesteps. Hooked features apply a seeded
    random tanh map to the noisy latent and split the output across the
    three layer maps, so pooling and concatenating the maps reconstructs
    the teacher vector exactly. The teacher is a fixed function of the
    input, never of the label: every client distills toward the same
    function, which is what keeps heterogeneous local models compatible.
    The vector is normalized to target_scale; the distillation loss
    softmaxes the anchor, so the scale sets how peaked that distribution
    is. Class y's text embedding is the unit vector
    normalize(mu_y + 0.1 * g_y) built from seeded orthonormal class
    directions; labels only size that class list.
    """

    provider_id = "synthetic"

    def __init__(self, labels, class_names: list[str] | None = None,
                 seed: int = 0, raw_dim: int = 1024, latent_channels: int = 4,
                 target_scale: float | None = None):
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise InvalidInputError("labels must be a non-empty 1-D sequence")
        self.num_classes = int(self.labels.max()) + 1
        if raw_dim < self.num_classes:
            raise InvalidInputError(
                f"raw_dim={raw_dim} cannot host {self.num_classes} orthogonal class directions")
        if class_names is None:
            class_names = [f"class_{c}" for c in range(self.num_classes)]
        if len(class_names) != self.num_classes:
            raise InvalidInputError("class_names length must match the label range")
        self.class_names = list(class_names)
        self.seed = int(seed)
        self.raw_dim = int(raw_dim)
        self.latent_channels = int(latent_channels)
        if self.latent_channels < 1:
            raise InvalidInputError("latent_channels must be positive")
        if target_scale is None:
            target_scale = DEFAULT_TARGET_SCALE
        if target_scale <= 0:
            raise InvalidInputError("target_scale must be positive")
        self.target_scale = float(target_scale)

        q = np.linalg.qr(
            rng(self.seed, _TAG_CLASS_DIRS).standard_normal((self.raw_dim,
                                                             self.num_classes)))[0]
        self._mu = q.T  # C x D, orthonormal rows
        w = self.raw_dim
        self._widths = {"mid_encoder": w // 4, "bottleneck": w // 2,
                        "mid_decoder": w - w // 4 - w // 2}
        # Orthonormal columns keep the per-pixel norm under the channel mix.
        mix = rng(self.seed, _TAG_MIX).standard_normal((max(self.latent_channels, 3), 3))
        self._mix = np.linalg.qr(mix)[0][:self.latent_channels]
        self._teachers: dict[int, np.ndarray] = {}
        self._schedule = scaled_linear_schedule()

    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def text_dim(self) -> int:
        return self.raw_dim

    def teacher_vector(self, latent) -> np.ndarray:
        """Deterministic response of the fabricated backbone to one latent."""
        x = np.asarray(latent, dtype=np.float64).ravel()
        if x.size == 0:
            raise InvalidInputError("latent must be non-empty")
        basis = self._teachers.get(x.size)
        if basis is None:
            basis = rng(self.seed, _TAG_TEACHER, x.size).standard_normal(
                (self.raw_dim, x.size)) / np.sqrt(x.size)
            self._teachers[x.size] = basis
        response = np.tanh(basis @ x)
        norm = np.linalg.norm(response)
        if not norm > 0:
            raise InvalidInputError("latent produced a zero teacher response")
        return self.target_scale * response / norm

    def encode_latent(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InvalidInputError(f"expected an H x W x 3 image, got {image.shape}")
        h, w = image.shape[:2]
        if h % 8 or w % 8:
            raise InvalidInputError("image sides must be multiples of 8")
        # 8x average pooling per channel, then a fixed 3 -> C channel mix.
        pooled = image.reshape(h // 8, 8, w // 8, 8, 3).mean(axis=(1, 3))
        return _ENCODER_GAIN * np.einsum("ct,hwt->chw", self._mix, pooled - 0.5)

    def unet_features(self, noisy_latent, t, layer_ids,
                      sample_id: int | None = None) -> dict[str, np.ndarray]:
        for lid in layer_ids:
            if lid not in self._widths:
                raise ConfigError(f"unknown layer id {lid!r}; "
                                  f"expected one of {sorted(self._widths)}")
        target = self.teacher_vector(noisy_latent)
        chunks: dict[str, np.ndarray] = {}
        start = 0
        for lid in DEFAULT_LAYER_IDS:  # canonical order fixes chunk positions
            width = self._widths[lid]
            chunks[lid] = target[start:start + width]
            start += width
        # Constant over space so pooling recovers the chunk exactly.
        return {lid: np.tile(chunks[lid][:, None, None], (1, 2, 2))
                for lid in layer_ids}

    def text_embed(self, prompt: str) -> np.ndarray:
        by_length = sorted(range(self.num_classes),
                           key=lambda c: -len(self.class_names[c]))
        for c in by_length:
            if self.class_names[c] and self.class_names[c] in prompt:
                g = rng(self.seed, _TAG_TEXT, c).standard_normal(self.raw_dim)
                return _normalize(self._mu[c] + 0.1 * g)
        # Unconditional or unrecognized prompt: a stable seeded direction.
        g = rng(self.seed, _TAG_PROMPT, _prompt_key(prompt)).standard_normal(self.raw_dim)
        return _normalize(g)


class DiffusionProvider(FeatureProvider):
    """Frozen pretrained latent-diffusion backbone.

    Wraps the VAE encoder, the denoising U-Net (activation hooks on a
    mid-encoder block, the bottleneck and a mid-decoder block) and the text
    encoder of a pretrained checkpoint. Needs the optional heavy dependencies;
    constructing without them raises a provider error.
    """

    provider_id = "diffusion"

    def __init__(self, model_id: str = "runwayml/stable-diffusion-v1-5",
                 device: str = "cpu", native_size: int | None = None):
        try:
            from diffusers import AutoencoderKL, DDPMScheduler, UNet2DConditionModel
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise ProviderError(
                "the diffusion provider needs 'diffusers' and 'transformers'; "
                "install the package's [diffusion] extra or use --provider synthetic"
            ) from exc
        import torch

        self._torch = torch
        self.device = device
        self.model_id = model_id
        self.native_size = native_size
        self.resize_applied: tuple[int, int] | None = None

        self.vae = AutoencoderKL.from_pretrained(
            model_id, subfolder="vae").to(device).eval()
        self.unet = UNet2DConditionModel.from_pretrained(
            model_id, subfolder="unet").to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
        self.text_encoder = CLIPTextModel.from_pretrained(
            model_id, subfolder="text_encoder").to(device).eval()
        for module in (self.vae, self.unet, self.text_encoder):
            module.requires_grad_(False)

        ddpm = DDPMScheduler.from_pretrained(model_id, subfolder="scheduler")
        self._schedule = NoiseSchedule(
            beta=ddpm.betas.detach().cpu().numpy().astype(np.float64))
        self._uncond_cache: np.ndarray | None = None
        self._layers = {
            "mid_encoder": self.unet.down_blocks[len(self.unet.down_blocks) // 2],
            "bottleneck": self.unet.mid_block,
            "mid_decoder": self.unet.up_blocks[len(self.unet.up_blocks) // 2],
        }

    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def text_dim(self) -> int:
        return int(self.text_encoder.config.hidden_size)

    def _to_tensor(self, array: np.ndarray):
        return self._torch.from_numpy(np.ascontiguousarray(array)).float().to(self.device)

    def encode_latent(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InvalidInputError(f"expected an H x W x 3 image, got {image.shape}")
        x = self._to_tensor(image.transpose(2, 0, 1)[None] * 2.0 - 1.0)
        if self.native_size is not None and x.shape[-1] != self.native_size:
            self.resize_applied = (int(x.shape[-1]), int(self.native_size))
            x = torch.nn.functional.interpolate(
                x, size=(self.native_size, self.native_size),
                mode="bilinear", align_corners=False)
        with torch.no_grad():
            # Posterior mean keeps encoding deterministic.
            latent = self.vae.encode(x).latent_dist.mean
        return latent[0].detach().cpu().numpy().astype(np.float64)

    def _uncond_embedding(self):
        if self._uncond_cache is None:
            tokens = self.tokenizer("", padding="max_length",
                                    max_length=self.tokenizer.model_max_length,
                                    return_tensors="pt").input_ids.to(self.device)
            with self._torch.no_grad():
                self._uncond_cache = self.text_encoder(tokens).last_hidden_state
        return self._uncond_cache

    def unet_features(self, noisy_latent, t, layer_ids,
                      sample_id: int | None = None) -> dict[str, np.ndarray]:
        torch = self._torch
        for lid in layer_ids:
            if lid not in self._layers:
                raise ConfigError(f"unknown layer id {lid!r}; "
                                  f"expected one of {sorted(self._layers)}")
        captured: dict[str, np.ndarray] = {}
        handles = []

        def grab(lid):
            def hook(_module, _inputs, output):
                out = output[0] if isinstance(output, tuple) else output
                captured[lid] = out[0].detach().cpu().numpy().astype(np.float64)
            return hook

        for lid in layer_ids:
            handles.append(self._layers[lid].register_forward_hook(grab(lid)))
        try:
            latent = self._to_tensor(np.asarray(noisy_latent))[None]
            timestep = torch.tensor([int(t)], device=self.device)
            with torch.no_grad():
                # Unconditional embedding: labels must not leak into anchors.
                self.unet(latent, timestep,
                          encoder_hidden_states=self._uncond_embedding())
        finally:
            for handle in handles:
                handle.remove()
        return {lid: captured[lid] for lid in layer_ids}

    def text_embed(self, prompt: str) -> np.ndarray:
        tokens = self.tokenizer(prompt, padding="max_length",
                                max_length=self.tokenizer.model_max_length,
                                truncation=True,
                                return_tensors="pt").input_ids.to(self.device)
        with self._torch.no_grad():
            # pooler_output is the end-of-sequence token embedding.
            pooled = self.text_encoder(tokens).pooler_output[0]
        return pooled.detach().cpu().numpy().astype(np.float64)


def make_provider(name: str, **kwargs) -> FeatureProvider:
    if name == "synthetic":
        return SyntheticProvider(**kwargs)
    if name == "diffusion":
        kwargs.pop("labels", None)
        kwargs.pop("class_names", None)
        return DiffusionProvider(**kwargs)
    raise ConfigError(f"unknown provider {name!r}; expected synthetic or diffusion")
