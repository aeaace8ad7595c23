"""Daily weather series: CSV ingestion, standardization, city-level splits.

The expected CSV has one row per (city, day) with columns::

    city_id,day,attr_tempmin,attr_tempmax,attr_humidity,attr_precip,attr_cloud,attr_dew

Extra columns are ignored. ``generate_surrogate_weather`` writes a synthetic
table in the same schema; it is surrogate data for tests and CI, not
observations.
"""

from dataclasses import dataclass
from typing import Dict

import numpy as np
import pandas as pd

from mtnp.datasets.batch import FunctionSplit
from mtnp.errors import DataError, FormatError, SizeError

ATTRIBUTES = ("tempmin", "tempmax", "humidity", "precip", "cloud", "dew")
TASK_NAMES = ("TempMin", "TempMax", "Humidity", "Precip", "Cloud", "Dew")
COLUMNS = ("city_id", "day") + tuple(f"attr_{a}" for a in ATTRIBUTES)
N_DAYS = 258
N_CITIES = 266
SPLIT_SIZES = {"train": 200, "valid": 30, "test": 33}


@dataclass
class WeatherSeries:
    """All cities on a common day axis.

    Attributes:
        city_ids: shape ``(C,)``.
        values: raw attribute values, shape ``(C, N_DAYS, 6)``.
        time: normalized time ``day / (N_DAYS - 1)``, shape ``(N_DAYS,)``.
    """

    city_ids: np.ndarray
    values: np.ndarray
    time: np.ndarray

    def __len__(self):
        return len(self.city_ids)


def load_weather_table(path) -> WeatherSeries:
    try:
        df = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise FormatError(f"weather table not found: {path}") from exc
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"{path}: missing column(s) {missing}")
    df = df[list(COLUMNS)]
    bad_day = ~df["day"].between(0, N_DAYS - 1)
    if bad_day.any():
        row = int(np.flatnonzero(bad_day.to_numpy())[0])
        raise FormatError(f"{path}: row {row + 2}: day {df['day'].iloc[row]} outside [0, {N_DAYS - 1}]")
    values = df[[f"attr_{a}" for a in ATTRIBUTES]]
    if values.isna().any().any():
        row = int(np.flatnonzero(values.isna().any(axis=1).to_numpy())[0])
        raise FormatError(f"{path}: row {row + 2}: empty attribute value")
    df = df.sort_values(["city_id", "day"], kind="stable")
    city_ids, series = [], []
    for city, group in df.groupby("city_id", sort=True):
        days = group["day"].to_numpy()
        if len(days) != N_DAYS or not np.array_equal(days, np.arange(N_DAYS)):
            raise FormatError(
                f"{path}: city {city!r} has {len(days)} rows; expected exactly days 0..{N_DAYS - 1}"
            )
        city_ids.append(city)
        series.append(group[[f"attr_{a}" for a in ATTRIBUTES]].to_numpy(dtype=float))
    return WeatherSeries(np.asarray(city_ids), np.stack(series), np.arange(N_DAYS) / (N_DAYS - 1))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values):
        return (values - self.mean) / self.std

    def inverse(self, values):
        return values * self.std + self.mean


def standardize_and_split(series: WeatherSeries, rng: np.random.Generator, sizes: Dict[str, int] = None):
    """City-level split; each attribute is z-scored with training-city statistics.

    Returns ``(splits, standardizer)``. Cities beyond the split total are unused.
    """
    sizes = dict(SPLIT_SIZES if sizes is None else sizes)
    need = sum(sizes.values())
    if len(series) < need:
        raise SizeError(f"{len(series)} cities available, {need} required")
    order = rng.permutation(len(series))
    parts, start = {}, 0
    for name in ("train", "valid", "test"):
        parts[name] = np.sort(order[start:start + sizes[name]])
        start += sizes[name]
    train_vals = series.values[parts["train"]].reshape(-1, len(ATTRIBUTES))
    std = train_vals.std(axis=0)
    if (std <= 1e-12).any():
        bad = [ATTRIBUTES[i] for i in np.flatnonzero(std <= 1e-12)]
        raise DataError(f"attribute(s) {bad} have zero variance on the training cities")
    scaler = Standardizer(train_vals.mean(axis=0), std)
    splits = {}
    for name, idx in parts.items():
        y = scaler.transform(series.values[idx])
        splits[name] = FunctionSplit(
            x=np.broadcast_to(series.time, (len(idx), N_DAYS)).copy(),
            y=y,
            scale=np.ones((len(idx), len(ATTRIBUTES))),
            task_names=TASK_NAMES,
        )
    return splits, scaler


def _smooth_noise(rng, n_series, n_days, length, scale):
    """AR(1) noise with correlation time ``length`` days."""
    rho = np.exp(-1.0 / length)
    out = np.empty((n_series, n_days))
    out[:, 0] = rng.standard_normal(n_series)
    for d in range(1, n_days):
        out[:, d] = rho * out[:, d - 1] + np.sqrt(1 - rho ** 2) * rng.standard_normal(n_series)
    return out * scale


def generate_surrogate_weather(seed: int, n_cities: int = N_CITIES, n_days: int = N_DAYS) -> pd.DataFrame:
    """Correlated six-attribute daily series in the CSV schema (surrogate data).

    Temperatures follow a seasonal cycle whose amplitude depends on a latent
    latitude; cloud cover drives precipitation probability and humidity; dew
    point tracks the minimum temperature and humidity.
    """
    rng = np.random.default_rng(seed)
    day = np.arange(n_days)
    lat = rng.uniform(-50, 60, n_cities)[:, None]
    season = np.sin(2 * np.pi * (day[None, :] - 100) / 365.0) * np.sign(lat + 1e-9)
    base = 25.0 - 0.35 * np.abs(lat) + rng.normal(0, 2, (n_cities, 1))
    amp = 3.0 + 0.2 * np.abs(lat)
    weather = _smooth_noise(rng, n_cities, n_days, 4.0, 1.0)
    cloud = 1.0 / (1.0 + np.exp(-(rng.normal(0, 0.8, (n_cities, 1)) + 1.5 * weather)))
    temp_mean = base + amp * season - 2.0 * cloud + _smooth_noise(rng, n_cities, n_days, 3.0, 1.5)
    diurnal = 10.0 - 6.0 * cloud + rng.normal(0, 0.8, (n_cities, n_days))
    tempmin = temp_mean - diurnal / 2
    tempmax = temp_mean + diurnal / 2
    humidity = np.clip(0.45 + 0.4 * cloud + _smooth_noise(rng, n_cities, n_days, 2.0, 0.06), 0.05, 1.0)
    precip = np.clip(cloud ** 2 * humidity + rng.normal(0, 0.05, (n_cities, n_days)), 0.0, 1.0)
    dew = tempmin - (1.0 - humidity) * 12.0 + rng.normal(0, 0.7, (n_cities, n_days))
    cols = {
        "city_id": np.repeat(np.arange(n_cities), n_days),
        "day": np.tile(day, n_cities),
        "attr_tempmin": tempmin.ravel(),
        "attr_tempmax": tempmax.ravel(),
        "attr_humidity": humidity.ravel(),
        "attr_precip": precip.ravel(),
        "attr_cloud": cloud.ravel(),
        "attr_dew": dew.ravel(),
    }
    return pd.DataFrame(cols)
