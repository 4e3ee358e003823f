"""Frozen-model backends: latent diffusion, CLIP encoders, a chat VLM.

These require the `models` extra (torch, diffusers, transformers) plus
downloaded weights, and realistically a GPU: inversion alone runs
hundreds of denoising steps per image.  Nothing here is imported unless a
backend is instantiated, so the synthetic path stays dependency-free.

All models are used frozen; no fine-tuning happens anywhere.
"""
from __future__ import annotations

import math

import numpy as np

from ..nada1_writer import BridgeExportError

_INSTALL_HINT = "install the bridge with the [models] extra to use pretrained backends"

DEFAULT_DIFFUSION_MODEL = "stabilityai/stable-diffusion-2-base"
DEFAULT_ENCODER_MODEL = "openai/clip-vit-base-patch32"
DEFAULT_VLM_MODEL = "llava-hf/llava-v1.6-34b-hf"


def _require(module_names):
    import importlib

    loaded = []
    for name in module_names:
        try:
            loaded.append(importlib.import_module(name))
        except ImportError as exc:
            raise BridgeExportError(f"{name} is not available; {_INSTALL_HINT}") from exc
    return loaded


class _CrossAttentionRecorder:
    """Attention processor that mirrors the default computation while
    storing per-head cross-attention probabilities for the current step."""

    def __init__(self, store: list, block_index: int):
        self.store = store
        self.block_index = block_index

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        import torch

        residual = hidden_states
        is_cross = encoder_hidden_states is not None
        query = attn.to_q(hidden_states)
        context = encoder_hidden_states if is_cross else hidden_states
        if attn.norm_cross is not None and is_cross:
            context = attn.norm_cross(context)
        key = attn.to_k(context)
        value = attn.to_v(context)
        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)
        probs = attn.get_attention_scores(query, key, attention_mask)
        if is_cross:
            # probs: (batch*heads, pixels, tokens); keep the conditional half
            # of a classifier-free-guidance batch (it is ordered [uncond, cond]).
            heads = attn.heads
            batch = probs.shape[0] // heads
            shaped = probs.reshape(batch, heads, probs.shape[1], probs.shape[2])
            cond = shaped[-1]
            side = int(math.isqrt(cond.shape[1]))
            if side * side == cond.shape[1]:
                grid = cond.permute(0, 2, 1).reshape(heads, cond.shape[2], side, side)
                self.store.append((self.block_index, grid.detach().float().cpu().numpy()))
        hidden_states = torch.bmm(probs, value)
        hidden_states = attn.batch_to_head_dim(hidden_states)
        hidden_states = attn.to_out[0](hidden_states)
        hidden_states = attn.to_out[1](hidden_states)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states


class PretrainedDiffusion:
    """Null-text inversion plus guided reconstruction with map capture.

    The trajectory is recovered by plain DDIM inversion under the prompt,
    then the unconditional embedding is optimized per reconstruction step
    so guided sampling retraces it; the reconstructed image is discarded
    and only the reconstruction pass's cross-attention maps are kept.
    """

    name = "pretrained-diffusion"

    def __init__(self, model_id: str = DEFAULT_DIFFUSION_MODEL, device: str = "cuda",
                 guidance_scale: float = 7.5, null_text_lr: float = 1e-2,
                 null_text_inner_steps: int = 10):
        (torch,) = _require(["torch"])
        _require(["diffusers"])
        from diffusers import DDIMScheduler, StableDiffusionPipeline

        self.device = device
        self.guidance_scale = guidance_scale
        self.null_text_lr = null_text_lr
        self.null_text_inner_steps = null_text_inner_steps
        self.pipe = StableDiffusionPipeline.from_pretrained(model_id)
        self.pipe.scheduler = DDIMScheduler.from_config(self.pipe.scheduler.config)
        self.pipe.to(device)
        self.pipe.unet.requires_grad_(False)
        self.pipe.vae.requires_grad_(False)
        self.pipe.text_encoder.requires_grad_(False)
        self._cross_blocks = [
            (name, module)
            for name, module in self.pipe.unet.named_modules()
            if name.endswith("attn2") and hasattr(module, "set_processor")
        ]
        self.grids = None  # discovered on the first reconstruction step

    def tokenize(self, text: str) -> list[int]:
        tok = self.pipe.tokenizer
        return tok(text, add_special_tokens=False)["input_ids"]

    def _encode_prompt(self, prompt: str):
        import torch

        tok = self.pipe.tokenizer
        ids = tok(prompt, padding="max_length", max_length=tok.model_max_length,
                  truncation=True, return_tensors="pt").input_ids.to(self.device)
        with torch.no_grad():
            return self.pipe.text_encoder(ids)[0]

    def _encode_image(self, image):
        import torch

        array = np.asarray(image.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
        tensor = torch.from_numpy(array).permute(2, 0, 1)[None].to(self.device)
        with torch.no_grad():
            latent = self.pipe.vae.encode(tensor).latent_dist.mean
        return latent * self.pipe.vae.config.scaling_factor

    def _ddim_invert(self, latent, cond, steps: int):
        """Forward (image-to-noise) DDIM walk under the prompt, scale 1."""
        import torch

        scheduler = self.pipe.scheduler
        scheduler.set_timesteps(steps, device=self.device)
        trajectory = [latent]
        current = latent
        with torch.no_grad():
            for t in reversed(scheduler.timesteps):
                noise = self.pipe.unet(current, t, encoder_hidden_states=cond).sample
                alpha_t = scheduler.alphas_cumprod[t]
                prev_t = t - scheduler.config.num_train_timesteps // steps
                alpha_prev = (
                    scheduler.alphas_cumprod[prev_t] if prev_t >= 0
                    else scheduler.final_alpha_cumprod
                )
                # Re-derive x_t from x_{t-1}: inverse of the DDIM update.
                x0 = (current - (1 - alpha_prev).sqrt() * noise) / alpha_prev.sqrt()
                current = alpha_t.sqrt() * x0 + (1 - alpha_t).sqrt() * noise
                trajectory.append(current)
        return trajectory

    def _optimize_null_embeddings(self, trajectory, cond, steps: int):
        """Per-step null-text embeddings that make guided sampling retrace
        the inversion trajectory."""
        import torch

        scheduler = self.pipe.scheduler
        scheduler.set_timesteps(steps, device=self.device)
        uncond = self._encode_prompt("")
        null_embeddings = []
        current = trajectory[-1]
        for i, t in enumerate(scheduler.timesteps):
            target = trajectory[len(trajectory) - 2 - i]
            uncond = uncond.clone().detach().requires_grad_(True)
            optimizer = torch.optim.Adam([uncond], lr=self.null_text_lr)
            for _ in range(self.null_text_inner_steps):
                noise_uncond = self.pipe.unet(current, t, encoder_hidden_states=uncond).sample
                with torch.no_grad():
                    noise_cond = self.pipe.unet(current, t, encoder_hidden_states=cond).sample
                noise = noise_uncond + self.guidance_scale * (noise_cond - noise_uncond)
                prev = scheduler.step(noise, t, current).prev_sample
                loss = torch.nn.functional.mse_loss(prev, target)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            null_embeddings.append(uncond.detach())
            with torch.no_grad():
                noise_uncond = self.pipe.unet(current, t, encoder_hidden_states=uncond).sample
                noise_cond = self.pipe.unet(current, t, encoder_hidden_states=cond).sample
                noise = noise_uncond + self.guidance_scale * (noise_cond - noise_uncond)
                current = scheduler.step(noise, t, current).prev_sample
        return null_embeddings, trajectory[-1]

    def attention_blocks(self, image_ref: str, prompt: str,
                         inversion_steps: int, reconstruction_steps: int):
        """Yield (heads, T, H_k, W_k) arrays, timestep-major then block order."""
        import torch
        from PIL import Image

        image = Image.open(image_ref)
        cond = self._encode_prompt(prompt)
        latent = self._encode_image(image)
        trajectory = self._ddim_invert(latent, cond, inversion_steps)
        # Downsample the trajectory to the reconstruction step count.
        stride = max(1, inversion_steps // reconstruction_steps)
        coarse = trajectory[:: stride][: reconstruction_steps + 1]
        null_embeddings, start = self._optimize_null_embeddings(
            coarse, cond, reconstruction_steps
        )

        scheduler = self.pipe.scheduler
        scheduler.set_timesteps(reconstruction_steps, device=self.device)
        token_count = len(self.tokenize(prompt))
        current = start
        for j, t in enumerate(scheduler.timesteps):
            store: list = []
            for block_index, (_, module) in enumerate(self._cross_blocks):
                module.set_processor(_CrossAttentionRecorder(store, block_index))
            with torch.no_grad():
                embeddings = torch.cat([null_embeddings[j], cond])
                noise = self.pipe.unet(
                    torch.cat([current, current]), t, encoder_hidden_states=embeddings
                ).sample
                noise_uncond, noise_cond = noise.chunk(2)
                guided = noise_uncond + self.guidance_scale * (noise_cond - noise_uncond)
                current = scheduler.step(guided, t, current).prev_sample
            store.sort(key=lambda item: item[0])
            if self.grids is None:
                self.grids = tuple((g.shape[2], g.shape[3]) for _, g in store)
            for _, grid in store:
                # Clip the padded conditioning window to the prompt tokens and
                # drop any numeric noise below zero.
                yield np.maximum(grid[:, :token_count], 0.0)


class PretrainedEncoder:
    """Frozen dual-encoder producing unit-norm image and text embeddings."""

    name = "pretrained-encoder"

    def __init__(self, model_id: str = DEFAULT_ENCODER_MODEL, device: str = "cpu"):
        _require(["torch", "transformers"])
        from transformers import CLIPModel, CLIPProcessor

        self.device = device
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)

    def encode_image(self, image_ref: str) -> np.ndarray:
        import torch
        from PIL import Image

        inputs = self.processor(images=Image.open(image_ref).convert("RGB"),
                                return_tensors="pt").to(self.device)
        with torch.no_grad():
            features = self.model.get_image_features(**inputs)[0]
        vec = features.cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)

    def encode_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with torch.no_grad():
            features = self.model.get_text_features(**inputs)[0]
        vec = features.cpu().numpy().astype(np.float32)
        return vec / np.linalg.norm(vec)


class PretrainedVlm:
    """Frozen chat VLM; replies are recorded verbatim, never parsed here."""

    name = "pretrained-vlm"

    def __init__(self, model_id: str = DEFAULT_VLM_MODEL, device: str = "cuda",
                 max_new_tokens: int = 256):
        _require(["torch", "transformers"])
        from transformers import AutoModelForVision2Seq, AutoProcessor

        self.device = device
        self.max_new_tokens = max_new_tokens
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = AutoModelForVision2Seq.from_pretrained(model_id).to(device).eval()

    def respond(self, image_ref: str, query: str) -> str:
        import torch
        from PIL import Image

        conversation = [
            {"role": "user",
             "content": [{"type": "image"}, {"type": "text", "text": query}]}
        ]
        prompt = self.processor.apply_chat_template(conversation, add_generation_prompt=True)
        inputs = self.processor(images=Image.open(image_ref).convert("RGB"),
                                text=prompt, return_tensors="pt").to(self.device)
        with torch.no_grad():
            output = self.model.generate(**inputs, max_new_tokens=self.max_new_tokens,
                                         do_sample=False)
        reply = self.processor.decode(output[0][inputs["input_ids"].shape[1]:],
                                      skip_special_tokens=True)
        return reply.strip()

    def caption(self, image_ref: str, label: str) -> str:
        query = (
            "Describe the visual elements in the image in one sentence. "
            f'Include the term "{label}".'
        )
        return self.respond(image_ref, query)
