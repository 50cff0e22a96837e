"""Data pipeline: CSV ingestion, normalization, windowing, splits,
contrastive pair selection, and the synthetic multi-region generator.

A dataset directory holds one CSV per region plus ``manifest.json``:

    { "interval_minutes": int, "lookback": int, "horizon": int,
      "regions": [{"id": str, "file": str}, ...],
      "future_covariates": [str, ...],
      "val_span_days": int, "test_span_days": int }

Region CSVs are UTF-8 with a header row ``timestamp,load,<covariate>...``;
timestamps are ISO-8601 at a fixed interval with no gaps, all other fields
are plain decimal floats. Every region must share the same column set.

History windows carry all raw channels (load first). Future windows carry
the manifest's future-known covariates plus synthesized calendar channels:
hour-of-day sine/cosine and a day-of-week one-hot. A holiday flag (or any
other future-known column) participates by being listed in
``future_covariates``. CSV-derived channels are z-scored per region with
training-split statistics; the bounded calendar channels are left as is.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, IngestionError

CALENDAR_CHANNELS = ["hod_sin", "hod_cos"] + [f"dow_{i}" for i in range(7)]

MINUTES_PER_DAY = 1440


@dataclass
class RegionSeries:
    region_id: str
    timestamps: np.ndarray  # datetime64[s], strictly increasing, fixed interval
    values: np.ndarray  # (n, channels) float64, column 0 is the load
    columns: list
    interval_minutes: int

    def __len__(self):
        return len(self.timestamps)

    def minute_of_day(self):
        seconds = self.timestamps.astype("int64")
        return (seconds // 60) % MINUTES_PER_DAY

    def day_of_week(self):
        # Monday == 0; the epoch (1970-01-01) was a Thursday.
        days = self.timestamps.astype("int64") // 86400
        return (days + 3) % 7


@dataclass
class Sample:
    region_id: str
    region_index: int
    anchor_index: int  # window start row
    hist: np.ndarray  # (lookback, hist_channels)
    future: np.ndarray  # (horizon, future_channels)
    target: np.ndarray  # (horizon, 1)
    context_vector: np.ndarray  # (future_channels,) mean of future rows


@dataclass
class NormStats:
    """Per-region, per-channel mean and standard deviation from the
    training split. Constant channels fall back to unit scale."""

    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, series_list, train_rows):
        stats = cls()
        for series in series_list:
            rows = train_rows[series.region_id]
            block = series.values[:rows]
            if rows < 2:
                raise ContractError(
                    f"region {series.region_id}: training split too short for statistics"
                )
            mean = block.mean(axis=0)
            std = block.std(axis=0)
            std = np.where(std < 1e-12, 1.0, std)
            stats.means[series.region_id] = mean
            stats.stds[series.region_id] = std
        return stats

    def _check(self, region_id):
        if region_id not in self.means:
            raise ContractError(f"no normalization statistics for region {region_id!r}")

    def normalize(self, region_id, values):
        self._check(region_id)
        return (values - self.means[region_id]) / self.stds[region_id]

    def denormalize(self, region_id, values):
        self._check(region_id)
        return values * self.stds[region_id] + self.means[region_id]

    def denormalize_load(self, region_id, values):
        self._check(region_id)
        return values * self.stds[region_id][0] + self.means[region_id][0]


REQUIRED_MANIFEST_KEYS = (
    "interval_minutes", "lookback", "horizon", "regions",
    "future_covariates", "val_span_days", "test_span_days",
)


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(path):
        raise IngestionError(f"missing dataset manifest {path}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = [k for k in REQUIRED_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise IngestionError(f"manifest {path} missing keys {missing}")
    interval = manifest["interval_minutes"]
    if not isinstance(interval, int) or interval < 1 or MINUTES_PER_DAY % interval != 0:
        raise IngestionError(
            f"interval_minutes must be a positive divisor of {MINUTES_PER_DAY}, got {interval!r}"
        )
    for key in ("lookback", "horizon"):
        if not isinstance(manifest[key], int) or manifest[key] < 1:
            raise IngestionError(f"manifest {key} must be a positive integer")
    for key in ("val_span_days", "test_span_days"):
        if not isinstance(manifest[key], int) or manifest[key] < 0:
            raise IngestionError(f"manifest {key} must be a non-negative integer")
    if not manifest["regions"]:
        raise IngestionError("manifest lists no regions")
    return manifest


def read_region_csv(path, region_id, interval_minutes):
    """Parse and validate one region CSV into a RegionSeries."""
    if not os.path.isfile(path):
        raise IngestionError(f"region {region_id}: missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "timestamp" or header[1] != "load":
            raise IngestionError(
                f"{path}: header must start with 'timestamp,load', got {header[:2]}"
            )
        columns = header[1:]
        timestamps = []
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(
                    f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            try:
                ts = np.datetime64(row[0], "s")
            except ValueError:
                raise IngestionError(
                    f"{path}: row {line_no}: invalid ISO-8601 timestamp {row[0]!r}"
                ) from None
            values = []
            for name, text in zip(columns, row[1:]):
                try:
                    value = float(text)
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {line_no}: column {name!r} is not a number: {text!r}"
                    ) from None
                if not math.isfinite(value):
                    raise IngestionError(
                        f"{path}: row {line_no}: column {name!r} is not finite"
                    )
                values.append(value)
            timestamps.append(ts)
            rows.append(values)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    stamps = np.array(timestamps, dtype="datetime64[s]")
    deltas = np.diff(stamps.astype("int64"))
    expected = interval_minutes * 60
    bad = np.nonzero(deltas != expected)[0]
    if bad.size:
        i = int(bad[0])
        raise IngestionError(
            f"{path}: timestamp gap between rows {i + 2} and {i + 3}: "
            f"{stamps[i]} -> {stamps[i + 1]} (expected {interval_minutes} minutes)"
        )
    return RegionSeries(
        region_id=region_id,
        timestamps=stamps,
        values=np.asarray(rows, dtype=np.float64),
        columns=columns,
        interval_minutes=interval_minutes,
    )


def ingest(data_dir):
    """Read the manifest and every region CSV; validate the shared schema."""
    manifest = read_manifest(data_dir)
    series_list = []
    for entry in manifest["regions"]:
        path = os.path.join(data_dir, entry["file"])
        series = read_region_csv(path, entry["id"], manifest["interval_minutes"])
        series_list.append(series)
    columns = series_list[0].columns
    for series in series_list[1:]:
        if series.columns != columns:
            raise IngestionError(
                f"region {series.region_id} columns {series.columns} differ from "
                f"region {series_list[0].region_id} columns {columns}"
            )
    for name in manifest["future_covariates"]:
        if name not in columns:
            raise IngestionError(
                f"future covariate {name!r} is not a column of the region files"
            )
    min_len = manifest["lookback"] + manifest["horizon"]
    for series in series_list:
        if len(series) < min_len:
            raise IngestionError(
                f"region {series.region_id}: series shorter than lookback+horizon "
                f"({len(series)} < {min_len})"
            )
    return manifest, series_list


def calendar_features(series: RegionSeries):
    """Bounded calendar channels: hour-of-day sin/cos, day-of-week one-hot."""
    minute = series.minute_of_day()
    phase = 2.0 * np.pi * minute / MINUTES_PER_DAY
    dow = series.day_of_week()
    one_hot = np.zeros((len(series), 7))
    one_hot[np.arange(len(series)), dow] = 1.0
    return np.column_stack([np.sin(phase), np.cos(phase), one_hot])


def window(series: RegionSeries, lookback, horizon, stride=1, future_covariates=(),
           region_index=0):
    """Slice a region series into (history, future, target) samples.

    With stride 1 the sample count is ``len - lookback - horizon + 1``.
    Future windows combine the named future-known columns with calendar
    channels; the context vector is the future window averaged over the
    horizon.
    """
    span = lookback + horizon
    if len(series) < span:
        raise ContractError(
            f"region {series.region_id}: series shorter than lookback+horizon "
            f"({len(series)} < {span})"
        )
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    fut_idx = []
    for name in future_covariates:
        if name not in series.columns:
            raise ContractError(f"unknown future covariate {name!r}")
        fut_idx.append(series.columns.index(name))
    calendar = calendar_features(series)
    samples = []
    for start in range(0, len(series) - span + 1, stride):
        horizon_rows = slice(start + lookback, start + span)
        fut_cov = series.values[horizon_rows][:, fut_idx] if fut_idx else \
            np.empty((horizon, 0))
        future = np.column_stack([fut_cov, calendar[horizon_rows]])
        samples.append(Sample(
            region_id=series.region_id,
            region_index=region_index,
            anchor_index=start,
            hist=series.values[start:start + lookback].copy(),
            future=future,
            target=series.values[horizon_rows][:, 0:1].copy(),
            context_vector=future.mean(axis=0),
        ))
    return samples


def split_rows(n_rows, interval_minutes, val_span_days, test_span_days):
    """Chronological boundaries: rows before ``val_start`` are the training
    span, then the validation span, then the test span."""
    steps_per_day = MINUTES_PER_DAY // interval_minutes
    test_rows = test_span_days * steps_per_day
    val_rows = val_span_days * steps_per_day
    if val_rows + test_rows >= n_rows:
        raise ContractError(
            f"validation+test spans ({val_rows + test_rows} rows) exceed the "
            f"series length {n_rows}"
        )
    test_start = n_rows - test_rows
    val_start = test_start - val_rows
    return val_start, test_start


def assign_split(sample: Sample, lookback, horizon, val_start, test_start):
    """Non-crossing rule: a window belongs to a split only when its full
    [start, start+lookback+horizon) range stays inside that split's span;
    boundary-straddling windows belong to none."""
    end = sample.anchor_index + lookback + horizon
    if end <= val_start:
        return "train"
    if sample.anchor_index >= val_start and end <= test_start:
        return "val"
    if sample.anchor_index >= test_start:
        return "test"
    return None


@dataclass
class DatasetBundle:
    region_ids: list
    lookback: int
    horizon: int
    interval_minutes: int
    hist_channels: list
    future_channels: list
    train: dict
    val: dict
    test: dict
    stats: NormStats
    series: dict  # raw (unnormalized) RegionSeries per region id
    manifest: dict

    def region_index(self, region_id):
        try:
            return self.region_ids.index(region_id)
        except ValueError:
            raise ContractError(f"unknown region {region_id!r}") from None

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)


def build_bundle(manifest, series_list, stride=1):
    lookback = manifest["lookback"]
    horizon = manifest["horizon"]
    train_rows = {}
    boundaries = {}
    for series in series_list:
        val_start, test_start = split_rows(
            len(series), manifest["interval_minutes"],
            manifest["val_span_days"], manifest["test_span_days"],
        )
        train_rows[series.region_id] = val_start
        boundaries[series.region_id] = (val_start, test_start)
    stats = NormStats.fit(series_list, train_rows)
    splits = {"train": {}, "val": {}, "test": {}}
    future_channels = list(manifest["future_covariates"]) + CALENDAR_CHANNELS
    for index, series in enumerate(series_list):
        normalized = RegionSeries(
            region_id=series.region_id,
            timestamps=series.timestamps,
            values=stats.normalize(series.region_id, series.values),
            columns=series.columns,
            interval_minutes=series.interval_minutes,
        )
        samples = window(
            normalized, lookback, horizon, stride=stride,
            future_covariates=manifest["future_covariates"], region_index=index,
        )
        val_start, test_start = boundaries[series.region_id]
        for name in splits:
            splits[name][series.region_id] = []
        for sample in samples:
            name = assign_split(sample, lookback, horizon, val_start, test_start)
            if name is not None:
                splits[name][series.region_id].append(sample)
    return DatasetBundle(
        region_ids=[s.region_id for s in series_list],
        lookback=lookback,
        horizon=horizon,
        interval_minutes=manifest["interval_minutes"],
        hist_channels=list(series_list[0].columns),
        future_channels=future_channels,
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        stats=stats,
        series={s.region_id: s for s in series_list},
        manifest=manifest,
    )


def load_dataset(data_dir, stride=1):
    manifest, series_list = ingest(data_dir)
    return build_bundle(manifest, series_list, stride=stride)


def contrastive_pairs(sample: Sample, pool, num_negatives, rng, lookback, horizon,
                      _distances=None):
    """Pick a context-similar positive and context-distant negatives.

    Distances are Euclidean over the samples' context vectors. The positive
    is the nearest pool sample whose window does not overlap the anchor's;
    negatives are drawn uniformly (seeded) from the farthest quartile,
    relaxed to every non-positive candidate when the quartile is too small.

    ``_distances`` lets a caller that already holds the anchor's distance
    row (ordered like the pool minus the anchor) skip recomputing it.
    """
    others = [p for p in pool if p.anchor_index != sample.anchor_index]
    if len(pool) <= num_negatives + 1:
        raise ContractError(
            f"pair pool of {len(pool)} too small for {num_negatives} negatives"
        )
    span = lookback + horizon
    if _distances is not None:
        distances = np.asarray(_distances, dtype=np.float64)
        if distances.shape != (len(others),):
            raise ContractError(
                f"precomputed distances have shape {distances.shape}, "
                f"expected ({len(others)},)"
            )
    else:
        distances = np.array([
            float(np.linalg.norm(p.context_vector - sample.context_vector))
            for p in others
        ])
    non_overlap = [
        i for i, p in enumerate(others)
        if abs(p.anchor_index - sample.anchor_index) >= span
    ]
    if not non_overlap:
        raise ContractError(
            "no non-overlapping candidate for the contrastive positive"
        )
    positive_pos = min(non_overlap, key=lambda i: (distances[i], others[i].anchor_index))
    order = np.argsort(-distances, kind="stable")
    quartile = max(1, math.ceil(len(others) / 4))
    candidates = [int(i) for i in order[:quartile] if i != positive_pos]
    if len(candidates) < num_negatives:
        candidates = [i for i in range(len(others)) if i != positive_pos]
    if len(candidates) < num_negatives:
        raise ContractError(
            f"only {len(candidates)} negative candidates for {num_negatives} requested"
        )
    chosen = rng.choice(len(candidates), size=num_negatives, replace=False)
    negatives = [others[candidates[int(i)]] for i in chosen]
    return others[positive_pos], negatives


def sample_at(series: RegionSeries, stats: NormStats, manifest, region_index, at):
    """Build the one sample whose forecast horizon starts at ``at``.

    ``at`` must be a series timestamp with a full lookback window before it
    and a full horizon from it onward.
    """
    try:
        ts = np.datetime64(at, "s")
    except ValueError:
        raise ContractError(f"invalid ISO-8601 timestamp {at!r}") from None
    lookback = manifest["lookback"]
    horizon = manifest["horizon"]
    idx = int(np.searchsorted(series.timestamps, ts))
    if idx >= len(series) or series.timestamps[idx] != ts:
        raise ContractError(
            f"timestamp {at} is not in region {series.region_id}'s series"
        )
    anchor = idx - lookback
    if anchor < 0:
        raise ContractError(
            f"timestamp {at} has only {idx} rows of history, need {lookback}"
        )
    if idx + horizon > len(series):
        raise ContractError(
            f"horizon from {at} runs past the end of region {series.region_id}'s series"
        )
    piece = RegionSeries(
        region_id=series.region_id,
        timestamps=series.timestamps[anchor:idx + horizon],
        values=stats.normalize(series.region_id, series.values[anchor:idx + horizon]),
        columns=series.columns,
        interval_minutes=series.interval_minutes,
    )
    sample = window(piece, lookback, horizon,
                    future_covariates=manifest["future_covariates"],
                    region_index=region_index)[0]
    sample.anchor_index = anchor
    return sample


SYNTH_COEFF_RANGES = {
    "base": (5.0, 10.0),
    "daily": (0.5, 1.5),
    "weekly": (0.3, 1.0),
    "temp": (0.05, 0.2),
    "temp_weekend": (-0.1, 0.1),
    "price": (0.3, 1.5),
}


def synth_generate(num_regions, days, interval_minutes=15, seed=0, noise_sigma=0.5,
                   temp_noise=1.5, coeff_ranges=None, start="2021-01-04T00:00:00"):
    """Generate multi-region load series with regional, contextual, and
    temporal structure.

    For region ``t`` at step ``i`` (``m`` = minute of day, ``w`` = minute of
    week, ``spd`` = steps per day, ``dow`` = day of week, Monday = 0):

        daily(i)   = sin(2*pi * m / 1440)
        weekly(i)  = sin(2*pi * w / (7 * 1440))
        tod(i)     = 0.5 * (1 - cos(2*pi * m / 1440))          # 0 at midnight, 1 at noon
        weekend(i) = 1 if dow in {5, 6} else 0
        price(i)   = 1.0 if 8 <= hour < 20 else 0.2            # two-level time-of-use
        temp_t(i)  = 12 + 10*sin(2*pi * i / (365.25*spd) - 2.0)
                        + 6*sin(2*pi * m / 1440 - 2.6) + ar_t(i)
        ar_t(i)    = 0.9 * ar_t(i-1) + eta_t(i),  eta ~ N(0, temp_noise^2), ar_t(-1) = 0

        load_t(i)  = base_t + a_t*daily(i) + b_t*weekly(i)
                        + (c_t + cw_t*weekend(i)) * temp_t(i) * tod(i)
                        + d_t*price(i) + eps_t(i),  eps ~ N(0, noise_sigma^2)

    Region coefficients draw uniformly from ``coeff_ranges`` (defaults in
    ``SYNTH_COEFF_RANGES``; keys base->base_t, daily->a_t, weekly->b_t,
    temp->c_t, temp_weekend->cw_t, price->d_t) using one spawned PRNG
    stream per region, in the order: coefficients, temperature noise, load
    noise. Per-region coefficients realize regional variation, the
    weekend-dependent temperature coefficient contextual variation, and the
    time-of-day profile temporal variation. Columns: load, temp, price.
    """
    if num_regions < 2:
        raise ContractError(f"need at least two regions, got {num_regions}")
    if days < 14:
        raise ContractError(f"need at least 14 days, got {days}")
    if MINUTES_PER_DAY % interval_minutes != 0:
        raise ContractError(
            f"interval_minutes must divide {MINUTES_PER_DAY}, got {interval_minutes}"
        )
    ranges = dict(SYNTH_COEFF_RANGES)
    if coeff_ranges:
        unknown = set(coeff_ranges) - set(ranges)
        if unknown:
            raise ContractError(f"unknown coefficient ranges: {sorted(unknown)}")
        ranges.update(coeff_ranges)
    steps_per_day = MINUTES_PER_DAY // interval_minutes
    n = days * steps_per_day
    step = np.arange(n)
    start_ts = np.datetime64(start, "s")
    timestamps = start_ts + step * np.timedelta64(interval_minutes * 60, "s")
    minute = (timestamps.astype("int64") // 60) % MINUTES_PER_DAY
    dow = (timestamps.astype("int64") // 86400 + 3) % 7
    week_minute = dow * MINUTES_PER_DAY + minute
    daily = np.sin(2 * np.pi * minute / MINUTES_PER_DAY)
    weekly = np.sin(2 * np.pi * week_minute / (7 * MINUTES_PER_DAY))
    tod = 0.5 * (1.0 - np.cos(2 * np.pi * minute / MINUTES_PER_DAY))
    weekend = (dow >= 5).astype(np.float64)
    hour = minute // 60
    price = np.where((hour >= 8) & (hour < 20), 1.0, 0.2)
    seasonal = 10.0 * np.sin(2 * np.pi * step / (365.25 * steps_per_day) - 2.0)
    diurnal = 6.0 * np.sin(2 * np.pi * minute / MINUTES_PER_DAY - 2.6)

    children = np.random.SeedSequence(seed).spawn(num_regions)
    series_list = []
    for t in range(num_regions):
        rng = np.random.default_rng(children[t])
        base = rng.uniform(*ranges["base"])
        a = rng.uniform(*ranges["daily"])
        b = rng.uniform(*ranges["weekly"])
        c = rng.uniform(*ranges["temp"])
        cw = rng.uniform(*ranges["temp_weekend"])
        d = rng.uniform(*ranges["price"])
        eta = rng.normal(0.0, temp_noise, size=n) if temp_noise > 0 else np.zeros(n)
        ar = np.zeros(n)
        prev = 0.0
        for i in range(n):
            prev = 0.9 * prev + eta[i]
            ar[i] = prev
        temp = 12.0 + seasonal + diurnal + ar
        eps = rng.normal(0.0, noise_sigma, size=n) if noise_sigma > 0 else np.zeros(n)
        load = (
            base + a * daily + b * weekly
            + (c + cw * weekend) * temp * tod
            + d * price + eps
        )
        series_list.append(RegionSeries(
            region_id=f"region_{t}",
            timestamps=timestamps.copy(),
            values=np.column_stack([load, temp, price]),
            columns=["load", "temp", "price"],
            interval_minutes=interval_minutes,
        ))
    return series_list


def write_synth_dataset(out_dir, num_regions, days, interval_minutes=15, seed=0,
                        lookback=96, horizon=48, val_span_days=30, test_span_days=30,
                        noise_sigma=0.5, temp_noise=1.5, coeff_ranges=None,
                        stride=1):
    """Generate and persist a synthetic dataset directory; returns the manifest."""
    series_list = synth_generate(
        num_regions, days, interval_minutes=interval_minutes, seed=seed,
        noise_sigma=noise_sigma, temp_noise=temp_noise, coeff_ranges=coeff_ranges,
    )
    os.makedirs(out_dir, exist_ok=True)
    regions = []
    for series in series_list:
        filename = f"{series.region_id}.csv"
        write_region_csv(os.path.join(out_dir, filename), series)
        regions.append({"id": series.region_id, "file": filename})
    manifest = {
        "interval_minutes": interval_minutes,
        "lookback": lookback,
        "horizon": horizon,
        "regions": regions,
        "future_covariates": ["temp", "price"],
        "val_span_days": val_span_days,
        "test_span_days": test_span_days,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def write_region_csv(path, series: RegionSeries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(series.columns))
        for i in range(len(series)):
            stamp = np.datetime_as_string(series.timestamps[i], unit="s")
            writer.writerow([stamp] + [repr(float(v)) for v in series.values[i]])
