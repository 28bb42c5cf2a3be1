"""Deterministic synthetic scenes: truth SIC, SAR/PM-like channels, labels.

A scene is a radial ice pack (with leads) inside a marginal-ice-zone annulus
(with disk floes) surrounded by open water. Channels are monotone mappings
of the truth plus multiplicative speckle, wind streaks over water, and
optional horizontal thermal banding. Everything is a pure function of
(params, seed).
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .gridstore import Grid, downsample_mean, read_grid, upsample_nearest, write_grid
from .util import derived_rng

OPEN_WATER = 0
MIZ = 1
ICE_PACK = 2
NODATA = 3

CHANNEL_NAMES = ("hh", "hv", "cross", "pm_h", "pm_v")


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    floe_density: float = 30.0       # expected floes per 100x100 cells
    floe_radius: tuple = (1, 10)
    lead_density: float = 3.0        # expected leads per 100x100 cells
    lead_width: tuple = (1, 2)
    speckle: float = 0.05            # variance of multiplicative speckle
    wind_amp: float = 0.03
    thermal_amp: float = 0.0         # RCM-like horizontal banding
    pm_blur: int = 4
    label_factor: int = 8
    miz_label_bias: float = 10.0
    miz_label_noise_sd: float = 5.0

    def validate(self):
        if self.size < 4 * self.label_factor:
            raise ValueError("size must be at least 4 * label_factor")
        if self.label_factor < 1:
            raise ValueError("label_factor must be >= 1")
        for name in ("floe_density", "lead_density", "speckle", "wind_amp", "thermal_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.floe_radius[0] <= self.floe_radius[1] <= 10:
            raise ValueError("floe_radius must lie within [1, 10]")
        if not 1 <= self.lead_width[0] <= self.lead_width[1] <= 2:
            raise ValueError("lead_width must lie within [1, 2]")
        if self.pm_blur < 0:
            raise ValueError("pm_blur must be >= 0")


@dataclass
class Scene:
    truth_sic: Grid
    channels: dict
    coarse_label: Grid
    region_chart: Grid
    seed: int
    params: SceneParams


def _disk(rows, cols, cr, cc, radius):
    return (rows - cr) ** 2 + (cols - cc) ** 2 <= radius ** 2


def gen_scene(params, seed):
    """Build one scene; bitwise deterministic in (params, seed)."""
    params.validate()
    n = params.size
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)

    geo = derived_rng(seed, "geometry")
    center_r = n / 2 + geo.uniform(-0.1, 0.1) * n
    center_c = n / 2 + geo.uniform(-0.1, 0.1) * n
    r_pack = geo.uniform(0.22, 0.34) * n
    r_miz = r_pack + geo.uniform(0.16, 0.26) * n

    dist = np.hypot(rows - center_r, cols - center_c)
    region = np.full((n, n), OPEN_WATER, dtype=np.int64)
    region[dist <= r_miz] = MIZ
    region[dist <= r_pack] = ICE_PACK

    truth = np.zeros((n, n), dtype=np.float64)
    truth[region == ICE_PACK] = 100.0
    annulus = region == MIZ
    truth[annulus] = 100.0 * (r_miz - dist[annulus]) / (r_miz - r_pack)

    # disk floes, clipped to the MIZ annulus so open water stays pure
    floes = derived_rng(seed, "floes")
    n_floes = int(round(params.floe_density * n * n / 10000.0))
    for _ in range(n_floes):
        theta = floes.uniform(0, 2 * np.pi)
        rho = floes.uniform(r_pack, r_miz)
        radius = floes.integers(params.floe_radius[0], params.floe_radius[1] + 1)
        stamp = _disk(rows, cols, center_r + rho * np.sin(theta),
                      center_c + rho * np.cos(theta), radius) & annulus
        truth[stamp] = 100.0

    # narrow leads through the pack only
    leads = derived_rng(seed, "leads")
    n_leads = int(round(params.lead_density * n * n / 10000.0))
    pack = region == ICE_PACK
    for _ in range(n_leads):
        width = leads.integers(params.lead_width[0], params.lead_width[1] + 1)
        offset = leads.integers(0, n)
        slope = leads.uniform(-0.5, 0.5)
        horizontal = leads.integers(0, 2) == 0
        axis = rows if horizontal else cols
        other = cols if horizontal else rows
        line = np.abs(axis - (offset + slope * other)) < width / 2.0 + 0.5
        truth[line & pack] = 0.0

    channels = _render_channels(truth, params, seed)

    coarse = downsample_mean(Grid(truth), params.label_factor)
    label = upsample_nearest(coarse, params.label_factor).values[:n, :n]

    return Scene(
        truth_sic=Grid(truth),
        channels=channels,
        coarse_label=Grid(label),
        region_chart=Grid(region.astype(np.float64)),
        seed=int(seed),
        params=params,
    )


def _render_channels(truth, params, seed):
    n = truth.shape[0]
    u = truth / 100.0
    hh = 0.05 + 0.20 * u
    hv = 0.02 + 0.18 * u

    if params.wind_amp > 0:
        wind = derived_rng(seed, "wind")
        period = wind.uniform(8.0, 16.0)
        phase = wind.uniform(0, 2 * np.pi)
        streaks = params.wind_amp * 0.5 * (1.0 + np.sin(2 * np.pi * np.arange(n) / period + phase))
        water = truth < 15.0
        hh = hh + np.where(water, streaks[:, None], 0.0)
        hv = hv + np.where(water, 0.5 * streaks[:, None], 0.0)

    if params.thermal_amp > 0:
        thermal = derived_rng(seed, "thermal")
        period = thermal.uniform(10.0, 24.0)
        phase = thermal.uniform(0, 2 * np.pi)
        bands = params.thermal_amp * np.sin(2 * np.pi * np.arange(n) / period + phase)
        hh = hh + bands[:, None]
        hv = hv + bands[:, None]

    if params.speckle > 0:
        shape = 1.0 / params.speckle
        hh = hh * derived_rng(seed, "speckle", "hh").gamma(shape, 1.0 / shape, size=hh.shape)
        hv = hv * derived_rng(seed, "speckle", "hv").gamma(shape, 1.0 / shape, size=hv.shape)

    hh = np.maximum(hh, 1e-4)
    hv = np.maximum(hv, 1e-4)
    cross = hv / hh

    smoothed = uniform_filter(truth, size=2 * params.pm_blur + 1, mode="nearest")
    pm_h = 170.0 + 0.80 * smoothed
    pm_v = 190.0 + 0.55 * smoothed

    return {
        "hh": Grid(hh),
        "hv": Grid(hv),
        "cross": Grid(cross),
        "pm_h": Grid(pm_h),
        "pm_v": Grid(pm_v),
    }


def corrupt_label(scene, miz_bias, miz_noise_sd, seed):
    """Perturb the coarse label on MIZ cells only; clamp to [0, 100]."""
    values = scene.coarse_label.values.copy()
    miz = (scene.region_chart.values == MIZ) & np.isfinite(values)
    if miz.any():
        noise = derived_rng(seed, "label_noise").normal(0.0, 1.0, size=int(miz.sum()))
        values[miz] = np.clip(values[miz] + miz_bias + miz_noise_sd * noise, 0.0, 100.0)
    return Grid(values)


def save_scene(scene, directory, training_label=None, dtype="f64"):
    """Persist a scene as SICG grids plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_grid(scene.truth_sic, directory / "truth.sicg", dtype=dtype)
    write_grid(scene.coarse_label, directory / "coarse_label.sicg", dtype=dtype)
    write_grid(scene.region_chart, directory / "region.sicg", dtype=dtype)
    for name, grid in scene.channels.items():
        write_grid(grid, directory / f"{name}.sicg", dtype=dtype)
    if training_label is not None:
        write_grid(training_label, directory / "label.sicg", dtype=dtype)
    manifest = {
        "seed": scene.seed,
        "params": asdict(scene.params),
        "channels": list(scene.channels.keys()),
        "has_training_label": training_label is not None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_scene(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = dict(manifest["params"])
    params["floe_radius"] = tuple(params["floe_radius"])
    params["lead_width"] = tuple(params["lead_width"])
    scene = Scene(
        truth_sic=read_grid(directory / "truth.sicg"),
        channels={name: read_grid(directory / f"{name}.sicg") for name in manifest["channels"]},
        coarse_label=read_grid(directory / "coarse_label.sicg"),
        region_chart=read_grid(directory / "region.sicg"),
        seed=int(manifest["seed"]),
        params=SceneParams(**params),
    )
    label = None
    if manifest.get("has_training_label"):
        label = read_grid(directory / "label.sicg")
    return scene, label
