"""Unpaired day-to-night image translation: attention-guided generators and
patch discriminators trained with a four-term objective (least-squares
adversarial, cycle, identity, and auxiliary-classifier terms).

Pixel convention inside this module is [-1, 1]; conversion from the [0, 1]
file convention happens at the boundaries. The printed-form loss variants
with inverted real/fake targets are kept as diagnostics (`inverted_*`), the
training loop uses the standard least-squares orientation.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F

from . import datakit, pyramid
from .attention import CamAttention

logger = logging.getLogger(__name__)

CAM_EPS = 1e-7


@dataclass
class LossWeights:
    """Coefficients of the joint objective; defaults are the working point
    lambda = (1, 10, 100, 1000)."""

    lambda1: float = 1.0  # adversarial
    lambda2: float = 10.0  # cycle
    lambda3: float = 100.0  # identity
    lambda4: float = 1000.0  # auxiliary classifier

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TranslatorConfig:
    batch_size: int = 1
    image_size: int = 256
    learning_rate: float = 0.0001
    iterations: int = 3000  # desk-scale default; paper-scale runs use 1_000_000
    base_width: int = 12
    n_res_blocks: int = 4
    buffer_size: int = 50
    use_cam: bool = True
    beta1: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    sample_interval: int = 500
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if min(self.batch_size, self.image_size, self.iterations, self.base_width) < 1:
            raise ValueError("batch_size, image_size, iterations, base_width must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be divisible by 4 (two stride-2 encoders)")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)


class _ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.c1 = nn.Conv2d(c, c, 3, padding=1)
        self.n1 = nn.InstanceNorm2d(c)
        self.c2 = nn.Conv2d(c, c, 3, padding=1)
        self.n2 = nn.InstanceNorm2d(c)

    def forward(self, x):
        y = F.relu(self.n1(self.c1(x)))
        return x + self.n2(self.c2(y))


class Generator(nn.Module):
    """Downsampling encoder, residual bottleneck with attention, mirrored
    decoder with a saturating (tanh) output. Fully convolutional, so any
    input size divisible by 4 works; `image_size` records the trained size.
    """

    def __init__(self, config: TranslatorConfig, direction: str):
        super().__init__()
        if direction not in ("s2t", "t2s"):
            raise ValueError(f"direction must be 's2t' or 't2s', got {direction!r}")
        self.direction = direction
        self.image_size = config.image_size
        self.use_cam = config.use_cam
        w = config.base_width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 7, padding=3), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * w), nn.ReLU(inplace=True),
            *[_ResBlock(4 * w) for _ in range(config.n_res_blocks)],
        )
        self.cam = CamAttention(4 * w) if config.use_cam else None
        self.post = nn.Sequential(nn.Conv2d(4 * w, 4 * w, 1), nn.ReLU(inplace=True))
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.InstanceNorm2d(2 * w), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), nn.InstanceNorm2d(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 3, 7, padding=3), nn.Tanh(),
        )

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(translated (N,3,H,W) in [-1,1], cam logit (N,), heatmap (N,H,W))."""
        feats = self.encoder(x)
        if self.cam is not None:
            logit, feats, heat = self.cam(feats)
        else:
            logit = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
            heat = torch.full(feats.shape[0:1] + feats.shape[2:], 0.5, dtype=x.dtype)
        out = self.decoder(self.post(feats))
        heat_full = F.interpolate(
            heat[:, None], size=x.shape[2:], mode="bilinear", align_corners=False
        )[:, 0]
        return out, logit, heat_full

    @torch.no_grad()
    def translate(self, img01: np.ndarray) -> np.ndarray:
        """[0,1] (3,H,W) array in, translated [0,1] array out."""
        self.eval()
        x = torch.from_numpy(np.asarray(img01, dtype=np.float32))[None] * 2.0 - 1.0
        y, _, _ = self.forward(x)
        return ((y[0].numpy() + 1.0) / 2.0).clip(0.0, 1.0)


class Discriminator(nn.Module):
    """Four-layer patch discriminator with an auxiliary-classifier head."""

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        w = config.base_width
        self.use_cam = config.use_cam
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * w), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * w), nn.LeakyReLU(0.2, inplace=True),
        )
        self.cam = CamAttention(4 * w) if config.use_cam else None
        self.patch = nn.Conv2d(4 * w, 1, 4, padding=1)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(patch logits (N,1,h,w), cam logit (N,), heatmap (N,h,w))."""
        feats = self.body(x)
        if self.cam is not None:
            logit, feats, heat = self.cam(feats)
        else:
            logit = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
            heat = torch.full(feats.shape[0:1] + feats.shape[2:], 0.5, dtype=x.dtype)
        return self.patch(feats), logit, heat


def generator_forward(x: Tensor, g: Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Validated single-image forward: x is (3, S, S) in [-1, 1]; returns the
    translated image, the auxiliary-classifier logit, and the heatmap
    upsampled to input resolution."""
    if x.dim() != 3 or x.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) input, got {tuple(x.shape)}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError("input dims must be divisible by 4")
    if float(x.min()) < -1.0 or float(x.max()) > 1.0:
        raise ValueError("input values must lie in [-1, 1]")
    y, logit, heat = g(x[None])
    return y[0], logit[0], heat[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def adversarial_loss(
    d: Discriminator, real_batch: Tensor, fake_batch: Tensor
) -> tuple[Tensor, Tensor]:
    """Least-squares adversarial pair over patch logits.

    d_loss = E[(D(real)-1)^2] + E[D(fake)^2]; g_loss = E[(D(fake)-1)^2].
    Detach the fake batch when optimizing the discriminator.
    """
    if real_batch.numel() == 0 or fake_batch.numel() == 0:
        raise ValueError("adversarial_loss needs nonempty batches")
    real_logits, _, _ = d(real_batch)
    fake_logits, _, _ = d(fake_batch)
    d_loss = ((real_logits - 1.0) ** 2).mean() + (fake_logits**2).mean()
    g_loss = ((fake_logits - 1.0) ** 2).mean()
    return d_loss, g_loss


def inverted_adversarial_loss(d_real_values: Tensor, d_fake_values: Tensor) -> Tensor:
    """Least-squares objective with inverted targets (real -> 0, fake -> 1):
    E[D(real)^2] + E[(1 - D(fake))^2]. Minimized by a discriminator scoring
    real images 0 and fakes 1; exposed purely as a sign-convention audit."""
    return (d_real_values**2).mean() + ((1.0 - d_fake_values) ** 2).mean()


def cycle_loss(x: Tensor, x_reconstructed: Tensor) -> Tensor:
    """Mean absolute difference between an image and its round trip."""
    if x.shape != x_reconstructed.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return (x - x_reconstructed).abs().mean()


def identity_loss(x: Tensor, same_domain_output: Tensor) -> Tensor:
    """Mean absolute difference between a same-domain input and its
    translation by the generator of that target domain."""
    if x.shape != same_domain_output.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(same_domain_output.shape)}")
    return (x - same_domain_output).abs().mean()


def cam_generator_loss(eta_on_own: Tensor, eta_on_other: Tensor) -> Tensor:
    """Binary cross-entropy on auxiliary-classifier probabilities: the
    classifier should say yes on its own domain and no on the other.
    Probabilities are clamped by 1e-7 before the logs."""
    p_own = eta_on_own.clamp(CAM_EPS, 1.0 - CAM_EPS)
    p_other = eta_on_other.clamp(CAM_EPS, 1.0 - CAM_EPS)
    return -(torch.log(p_own).mean() + torch.log(1.0 - p_other).mean())


def cam_discriminator_loss(
    real_cam_logits: Tensor, fake_cam_logits: Tensor
) -> tuple[Tensor, Tensor]:
    """Least-squares pair on the discriminator's auxiliary-classifier logits
    (standard orientation: real -> 1, fake -> 0); returns (d_term, g_term)."""
    d_term = ((real_cam_logits - 1.0) ** 2).mean() + (fake_cam_logits**2).mean()
    g_term = ((fake_cam_logits - 1.0) ** 2).mean()
    return d_term, g_term


def inverted_cam_discriminator_loss(real_cam_values: Tensor, fake_cam_values: Tensor) -> Tensor:
    """Inverted-target variant of the auxiliary-classifier least-squares
    term: E[eta(real)^2] + E[(1 - eta(fake))^2]; sign-convention audit only."""
    return (real_cam_values**2).mean() + ((1.0 - fake_cam_values) ** 2).mean()


def total_objective(
    gan: Tensor | float,
    cycle: Tensor | float,
    identity: Tensor | float,
    cam: Tensor | float,
    w: LossWeights,
) -> Tensor | float:
    """Weighted sum of the four direction-summed components."""
    return w.lambda1 * gan + w.lambda2 * cycle + w.lambda3 * identity + w.lambda4 * cam


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class ImageBuffer:
    """Replay pool of past generated images; each query either returns the
    new image or swaps it against a stored one with probability 1/2."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.images: list[Tensor] = []

    def query(self, img: Tensor) -> Tensor:
        if self.capacity == 0:
            return img
        if len(self.images) < self.capacity:
            self.images.append(img.detach().clone())
            return img
        if float(torch.rand(())) < 0.5:
            k = int(torch.randint(0, self.capacity, ()))
            out = self.images[k].clone()
            self.images[k] = img.detach().clone()
            return out
        return img


@dataclass
class TranslatorBundle:
    g_s2t: Generator
    g_t2s: Generator
    d_s: Discriminator
    d_t: Discriminator
    config: TranslatorConfig
    seed: int


def _prepare_images(images, size: int) -> Tensor:
    arrs = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if img.shape[1:] != (size, size):
            img = pyramid.resize(img, size, size)
        arrs.append(np.clip(img, 0.0, 1.0))
    stack = torch.from_numpy(np.stack(arrs).astype(np.float32))
    return stack * 2.0 - 1.0


def train_translator(
    source_images,
    target_images,
    config: TranslatorConfig,
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> tuple[TranslatorBundle, list[dict]]:
    """Adversarially train both translation directions on unpaired image sets.

    ``source_images``/``target_images`` are sequences of (3, H, W) arrays in
    [0, 1] (resized to config.image_size as needed). Updates alternate:
    discriminators on real plus replay-buffered fakes, then generators on the
    full weighted objective. Deterministic given the seed. Returns the four
    networks plus a per-iteration component history; with out_dir set, sample
    grids (input | heatmap | output) and checkpoints are dumped periodically.
    """
    if len(source_images) == 0 or len(target_images) == 0:
        raise ValueError("both image sets must be nonempty")
    torch.manual_seed(seed)
    src = _prepare_images(source_images, config.image_size)
    tgt = _prepare_images(target_images, config.image_size)

    g_s2t = Generator(config, "s2t")
    g_t2s = Generator(config, "t2s")
    d_s = Discriminator(config)
    d_t = Discriminator(config)
    g_opt = torch.optim.Adam(
        itertools.chain(g_s2t.parameters(), g_t2s.parameters()),
        lr=config.learning_rate, betas=(config.beta1, 0.999),
    )
    d_opt = torch.optim.Adam(
        itertools.chain(d_s.parameters(), d_t.parameters()),
        lr=config.learning_rate, betas=(config.beta1, 0.999),
    )
    buf_t = ImageBuffer(config.buffer_size)
    buf_s = ImageBuffer(config.buffer_size)
    w = config.weights
    history: list[dict] = []

    for it in range(config.iterations):
        i = int(torch.randint(0, len(src), ()))
        j = int(torch.randint(0, len(tgt), ()))
        xs = src[i : i + 1]
        xt = tgt[j : j + 1]

        # -- discriminator update on real + buffered fakes
        with torch.no_grad():
            fake_t_raw, _, _ = g_s2t(xs)
            fake_s_raw, _, _ = g_t2s(xt)
        fake_t = buf_t.query(fake_t_raw)
        fake_s = buf_s.query(fake_s_raw)
        d_adv_t, _ = adversarial_loss(d_t, xt, fake_t)
        d_adv_s, _ = adversarial_loss(d_s, xs, fake_s)
        d_loss = d_adv_t + d_adv_s
        if config.use_cam:
            _, cam_real_t, _ = d_t(xt)
            _, cam_fake_t, _ = d_t(fake_t)
            _, cam_real_s, _ = d_s(xs)
            _, cam_fake_s, _ = d_s(fake_s)
            cam_d_t, _ = cam_discriminator_loss(cam_real_t, cam_fake_t)
            cam_d_s, _ = cam_discriminator_loss(cam_real_s, cam_fake_s)
            d_loss = d_loss + cam_d_t + cam_d_s
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()

        # -- generator update on the full objective
        fake_t, cam_s2t_on_s, _ = g_s2t(xs)
        fake_s, cam_t2s_on_t, _ = g_t2s(xt)
        rec_s, _, _ = g_t2s(fake_t)
        rec_t, _, _ = g_s2t(fake_s)
        idt_t, cam_s2t_on_t, _ = g_s2t(xt)
        idt_s, cam_t2s_on_s, _ = g_t2s(xs)

        _, g_adv_t = adversarial_loss(d_t, xt, fake_t)
        _, g_adv_s = adversarial_loss(d_s, xs, fake_s)
        gan_term = g_adv_t + g_adv_s
        if config.use_cam:
            _, cam_fake_t, _ = d_t(fake_t)
            _, cam_fake_s, _ = d_s(fake_s)
            gan_term = (
                gan_term
                + ((cam_fake_t - 1.0) ** 2).mean()
                + ((cam_fake_s - 1.0) ** 2).mean()
            )
        cycle_term = cycle_loss(xs, rec_s) + cycle_loss(xt, rec_t)
        identity_term = identity_loss(xt, idt_t) + identity_loss(xs, idt_s)
        if config.use_cam:
            cam_term = cam_generator_loss(
                torch.sigmoid(cam_s2t_on_s), torch.sigmoid(cam_s2t_on_t)
            ) + cam_generator_loss(
                torch.sigmoid(cam_t2s_on_t), torch.sigmoid(cam_t2s_on_s)
            )
        else:
            cam_term = torch.zeros(())
        g_loss = total_objective(gan_term, cycle_term, identity_term, cam_term, w)
        if not torch.isfinite(g_loss) or not torch.isfinite(d_loss):
            raise RuntimeError(
                f"non-finite translator loss at iteration {it}: d={float(d_loss)} g={float(g_loss)}"
            )
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

        history.append(
            {
                "iteration": it,
                "d_loss": float(d_loss.detach()),
                "gan": float(gan_term.detach()),
                "cycle": float(cycle_term.detach()),
                "identity": float(identity_term.detach()),
                "cam": float(cam_term.detach()),
                "g_total": float(g_loss.detach()),
            }
        )
        if out_dir is not None:
            bundle = TranslatorBundle(g_s2t, g_t2s, d_s, d_t, config, seed)
            if config.sample_interval > 0 and (it + 1) % config.sample_interval == 0:
                dump_samples(bundle, src[: min(4, len(src))], Path(out_dir) / f"samples_{it + 1:06d}.png")
            if config.checkpoint_interval > 0 and (it + 1) % config.checkpoint_interval == 0:
                save_bundle(bundle, Path(out_dir) / f"translator_{it + 1:06d}.pt")

    bundle = TranslatorBundle(g_s2t, g_t2s, d_s, d_t, config, seed)
    if out_dir is not None:
        save_bundle(bundle, Path(out_dir) / "translator.pt")
        dump_samples(bundle, src[: min(4, len(src))], Path(out_dir) / "samples_final.png")
    return bundle, history


def dump_samples(bundle: TranslatorBundle, batch: Tensor, path: str | Path) -> None:
    """Write a grid with one column per image: input row, heatmap row,
    translated-output row."""
    was_training = bundle.g_s2t.training
    bundle.g_s2t.eval()
    with torch.no_grad():
        out, _, heat = bundle.g_s2t(batch)
    bundle.g_s2t.train(was_training)
    rows = []
    for src_row in (batch, None, out):
        tiles = []
        for k in range(batch.shape[0]):
            if src_row is None:
                tiles.append(np.repeat(heat[k].numpy()[None], 3, axis=0))
            else:
                tiles.append(((src_row[k].numpy() + 1.0) / 2.0).clip(0, 1))
        rows.append(np.concatenate(tiles, axis=2))
    grid = np.concatenate(rows, axis=1)
    datakit.save_image(grid, path)


def translate_dataset(
    manifest: datakit.DatasetManifest,
    generator: Generator,
    out_dir: str | Path,
    workers: int = 1,
) -> datakit.DatasetManifest:
    """Translate every manifest image, copying annotations verbatim.

    Images at the generator's native size go straight through; larger frames
    take the pyramid path (translate the coarse top, keep the band-pass
    levels). Per-image I/O failures are logged and skip that image. The
    output manifest is tagged "generated" and saved as
    out_dir/generated.manifest.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    size = generator.image_size

    def translate_one(entry):
        img = datakit.load_image(manifest.image_path(entry))
        if img.shape[1:] == (size, size):
            out01 = generator.translate(img)
        else:
            out01 = pyramid.translate_via_pyramid(
                img.astype(np.float64), generator.translate, low_res=size
            )
        name = Path(entry.image_path).stem + "_generated.png"
        datakit.save_image(out01, img_dir / name)
        return datakit.ManifestEntry(
            image_path=f"images/{name}",
            domain="generated",
            boxes=list(entry.boxes),
            provenance=f"translated from {entry.image_path}",
        )

    entries: list[datakit.ManifestEntry] = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(e, pool.submit(translate_one, e)) for e in manifest.entries]
        for entry, fut in futures:
            try:
                entries.append(fut.result())
            except OSError as exc:
                logger.warning("skipping %s: %s", entry.image_path, exc)
    else:
        for entry in manifest.entries:
            try:
                entries.append(translate_one(entry))
            except OSError as exc:
                logger.warning("skipping %s: %s", entry.image_path, exc)
    out = datakit.DatasetManifest(
        entries=entries, class_names=list(manifest.class_names), root=out_dir
    )
    datakit.save_manifest(out, out_dir / "generated.manifest")
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_bundle(bundle: TranslatorBundle, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "translator",
            "config": asdict(bundle.config),
            "seed": bundle.seed,
            "g_s2t": bundle.g_s2t.state_dict(),
            "g_t2s": bundle.g_t2s.state_dict(),
            "d_s": bundle.d_s.state_dict(),
            "d_t": bundle.d_t.state_dict(),
        },
        path,
    )


def load_bundle(path: str | Path) -> TranslatorBundle:
    blob = torch.load(path, weights_only=False)
    if blob.get("kind") != "translator":
        raise ValueError(f"{path} is not a translator checkpoint")
    config = TranslatorConfig(**blob["config"])
    bundle = TranslatorBundle(
        Generator(config, "s2t"),
        Generator(config, "t2s"),
        Discriminator(config),
        Discriminator(config),
        config,
        blob["seed"],
    )
    bundle.g_s2t.load_state_dict(blob["g_s2t"])
    bundle.g_t2s.load_state_dict(blob["g_t2s"])
    bundle.d_s.load_state_dict(blob["d_s"])
    bundle.d_t.load_state_dict(blob["d_t"])
    return bundle
