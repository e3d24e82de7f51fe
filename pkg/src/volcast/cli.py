"""Command line entry point: simulate, train, forecast, evaluate, report.

Every subcommand resolves a :class:`RunConfig` from an optional JSON file
plus flags, echoes it as ``config_<command>.json`` in the output directory
and writes ``manifest_<command>.json`` (config, seed, package version and
SHA-256 digests of the inputs). Exit codes: 0 success, 1 configuration
error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from volcast import __version__
from volcast import autodiff as ad
from volcast import garch
from volcast.data import (DataError, NllTable, Series, SeriesTable, SvSimParams, export_long,
                          friedman_test, ingest, simulate_sv, split_points, window)
from volcast.dsvm import DivergenceError, DsvmConfig
from volcast.forecasting import read_forecasts, rolling_forecast, write_forecasts
from volcast.training import TrainConfig, TrainingDiverged, load_model, save_model, train

log = logging.getLogger("volcast")

COMMANDS = ("simulate", "train", "forecast", "evaluate", "report")
MODELS = ("dsvm",) + garch.VARIANTS
EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    data: str | None = None
    out: str = "out"
    checkpoint: str | None = None
    kind: str = "return"
    models: list = field(default_factory=lambda: ["dsvm"])
    # model (defaults follow the reference settings)
    d_z: int = 1
    d_h: int = 10
    d_a: int = 10
    width: int = 16
    window: int = 10
    samples: int = 1000
    analytic_vol: bool = False
    # training
    batch: int = 128
    epochs: int = 300
    lr: float = 1e-3
    valid_samples: int = 1
    clip_norm: float | None = None
    stride: int = 1
    ratios: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    # baselines
    garch_window: int = 1000
    garch_p: int = 1
    garch_q: int = 1
    # simulation
    n_series: int = 50
    length: int = 1500
    mu: float = -1.0
    ar_phi: float = 0.95
    sigma_z: float = 0.2
    rho: float = -0.4
    start_date: str = "2000-01-03"
    threads: int | None = None

    def validate(self):
        if self.seed is None:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        bad = [m for m in self.models if m not in MODELS]
        if bad or not self.models:
            raise ConfigError(f"unknown model(s) {bad}; choose from {', '.join(MODELS)}")
        positive = ("d_z", "d_h", "d_a", "width", "window", "samples", "batch", "epochs",
                    "valid_samples", "stride", "garch_window", "garch_p", "garch_q", "n_series", "length")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1) > 1e-9 or min(self.ratios) < 0:
            raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if self.kind not in ("return", "price"):
            raise ConfigError(f"kind must be 'return' or 'price', got {self.kind!r}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            dt.date.fromisoformat(self.start_date)
            SvSimParams(self.mu, self.ar_phi, self.sigma_z, self.rho)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def model_config(self):
        return DsvmConfig(d_z=self.d_z, d_h=self.d_h, d_a=self.d_a, width=self.width)

    @property
    def checkpoint_path(self):
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.ckpt"


FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def load_config(path=None, overrides=None):
    """Resolve a config from a JSON file (may be empty) and flag overrides.

    Unknown keys are rejected by name. The result is validated.
    """
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        if text.strip():
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(values) - FIELDS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _provenance(cfg, command, inputs):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = dataclasses.asdict(cfg)
    _write_json(out / f"config_{command}.json", doc)
    digests = {}
    for p in inputs:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
        for f in files:
            digests[str(f)] = _sha256(f)
    _write_json(out / f"manifest_{command}.json", {
        "command": command,
        "config": doc,
        "seed": cfg.seed,
        "version": __version__,
        "inputs": digests,
    })


def _require(path, what):
    if path is None:
        raise ConfigError(f"{what} path is required")
    if not Path(path).exists():
        raise ConfigError(f"{what} path {path} does not exist")
    return Path(path)


def _workers(cfg, n_jobs):
    n = cfg.threads if cfg.threads is not None else (os.cpu_count() or 1)
    return max(1, min(n, n_jobs))


def _pmap(fn, jobs, workers):
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _series_seed(seed, index):
    return int(ad.Rng(seed, (index,)).integers(2**31))


# --- simulate -----------------------------------------------------------------


def cmd_simulate(cfg):
    params = SvSimParams(cfg.mu, cfg.ar_phi, cfg.sigma_z, cfg.rho)
    start = dt.date.fromisoformat(cfg.start_date)
    dates = [(start + dt.timedelta(days=i)).isoformat() for i in range(cfg.length)]
    base = ad.Rng(cfg.seed)
    table = SeriesTable()
    width = len(str(cfg.n_series - 1))
    for i in range(cfg.n_series):
        r, s = simulate_sv(params, cfg.length, base.spawn(i))
        table.series[f"sv{i:0{width}d}"] = Series(dates, r, sigma=s)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _provenance(cfg, "simulate", [])
    export_long(table, out / "corpus.csv")
    print(f"wrote {cfg.n_series} series of length {cfg.length} to {out / 'corpus.csv'}")


# --- train --------------------------------------------------------------------


def _load_table(cfg):
    table = ingest(_require(cfg.data, "data"), kind=cfg.kind)
    if len(table) == 0:
        raise DataError(f"{cfg.data}: no series found")
    if table.dropped_rows:
        log.warning("dropped %d rows with missing values", table.dropped_rows)
    return table


def _windows(cfg, table):
    """Chronological per-series split of the returns, then windows inside each part."""
    tr, va = [], []
    for sid, s in table.series.items():
        a, b = split_points(s.values.size, cfg.ratios)
        if a < cfg.window or b - a < cfg.window:
            raise DataError(f"series {sid!r} is too short for window {cfg.window} after splitting")
        tr.append(window(s.values[:a], cfg.window, cfg.stride))
        va.append(window(s.values[a:b], cfg.window, cfg.stride))
    return np.concatenate(tr), np.concatenate(va)


def cmd_train(cfg):
    table = _load_table(cfg)
    _provenance(cfg, "train", [cfg.data])
    tr, va = _windows(cfg, table)
    log.info("training on %d windows, validating on %d", len(tr), len(va))
    ckpt = cfg.checkpoint_path
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tc = TrainConfig(batch_size=cfg.batch, epochs=cfg.epochs, lr=cfg.lr, seed=cfg.seed,
                     valid_samples=cfg.valid_samples, clip_norm=cfg.clip_norm, checkpoint_path=str(ckpt))
    out = Path(cfg.out)
    try:
        gen, inf, report = train(tr, va, tc, cfg.model_config)
    except TrainingDiverged as exc:
        exc.report.write_csv(out / "train_report.csv")
        raise
    save_model(ckpt, gen, inf)
    report.write_csv(out / "train_report.csv")
    report.write_summary(out / "train_summary.json")
    print(f"selected epoch {report.selected_epoch}; checkpoint {ckpt}")


# --- forecast -----------------------------------------------------------------


def _dsvm_job(ckpt, values, dates, T, S, seed, start, analytic):
    gen, inf = load_model(ckpt)
    return rolling_forecast(gen, inf, values, T, S, seed=seed, start=start, timestamps=dates,
                            analytic=analytic)


def _garch_job(variant, p, q, values, dates, window_len, seed, start):
    spec = garch.GarchSpec(variant, p, q)
    return garch.rolling_eval(spec, values, window=window_len, seed=seed, start=start, timestamps=dates)


def _merge_forecasts(path, records, tag):
    keep = [r for r in read_forecasts(path) if r.model_tag != tag] if path.exists() else []
    # stable sort: rows grouped by tag, so the file does not depend on run order
    rows = sorted(keep + list(records), key=lambda r: r.model_tag)
    write_forecasts(path, rows)


def cmd_forecast(cfg):
    table = _load_table(cfg)
    inputs = [cfg.data]
    if "dsvm" in cfg.models:
        inputs.append(_require(str(cfg.checkpoint_path), "checkpoint"))
    _provenance(cfg, "forecast", inputs)
    fdir = Path(cfg.out) / "forecasts"
    fdir.mkdir(parents=True, exist_ok=True)
    ids = table.ids()
    for model in cfg.models:
        jobs = []
        for i, sid in enumerate(ids):
            s = table[sid]
            start = split_points(s.values.size, cfg.ratios)[1]
            seed = _series_seed(cfg.seed, i)
            if model == "dsvm":
                jobs.append((str(cfg.checkpoint_path), s.values, s.dates, cfg.window, cfg.samples, seed,
                             start, cfg.analytic_vol))
            else:
                if s.values.size <= cfg.garch_window:
                    raise DataError(f"series {sid!r} (length {s.values.size}) is not longer than "
                                    f"the rolling window {cfg.garch_window}")
                jobs.append((model, cfg.garch_p, cfg.garch_q, s.values, s.dates, cfg.garch_window, seed, start))
        fn = _dsvm_job if model == "dsvm" else _garch_job
        results = _pmap(fn, jobs, _workers(cfg, len(jobs)))
        for sid, recs in zip(ids, results):
            _merge_forecasts(fdir / f"{sid}.csv", recs, model)
        log.info("%s: %d series forecast", model, len(ids))
    print(f"wrote forecasts for {len(ids)} series to {fdir}")


# --- evaluate / report --------------------------------------------------------


def _read_forecast_dir(path):
    path = _require(path, "forecast directory")
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"{path}: no forecast CSV files")
    out = {}
    for f in files:
        try:
            out[f.stem] = read_forecasts(f)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return out


def _forecast_source(cfg):
    return cfg.data if cfg.data is not None else str(Path(cfg.out) / "forecasts")


def nll_table(forecasts):
    """Mean test NLL per (series, model); a model with no finite record is NA."""
    models = sorted({r.model_tag for recs in forecasts.values() for r in recs},
                    key=lambda m: (m != "dsvm", m))
    series = sorted(forecasts)
    vals = np.full((len(series), len(models)), np.nan)
    for i, sid in enumerate(series):
        for j, m in enumerate(models):
            x = np.array([r.pred_nll for r in forecasts[sid] if r.model_tag == m])
            x = x[np.isfinite(x)]
            if x.size:
                vals[i, j] = x.mean()
    return NllTable(series, models, vals)


def cmd_evaluate(cfg):
    src = _forecast_source(cfg)
    forecasts = _read_forecast_dir(src)
    _provenance(cfg, "evaluate", [src])
    table = nll_table(forecasts)
    out = Path(cfg.out)
    table.write_csv(out / "nll_table.csv")
    try:
        res = friedman_test(table)
        doc = dataclasses.asdict(res)
        doc["mean_ranks"] = dict(zip(table.models, res.mean_ranks))
    except DataError as exc:
        doc = {"error": str(exc)}
    doc["models"] = table.models
    _write_json(out / "friedman.json", doc)
    print(f"NLL table: {len(table.series)} series x {len(table.models)} models -> {out / 'nll_table.csv'}")
    if "statistic" in doc:
        print(f"Friedman chi2 = {doc['statistic']:.4f}, df = {doc['df']}, p = {doc['p_value']:.4g}")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def svg_chart(x_labels, lines, title, width=900, height=320):
    """Line chart as SVG text. ``lines`` maps a name to (values, colour)."""
    pad_l, pad_r, pad_t, pad_b = 50, 130, 30, 30
    n = len(x_labels)
    finite = [v for vals, _ in lines.values() for v in vals if math.isfinite(v)]
    top = max(finite) if finite else 1.0
    top = top if top > 0 else 1.0
    w, h = width - pad_l - pad_r, height - pad_t - pad_b

    def px(i):
        return pad_l + (w * i / (n - 1) if n > 1 else w / 2)

    def py(v):
        return pad_t + h * (1 - v / top)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad_l}" y="18" font-size="13">{_esc(title)}</text>',
             f'<line x1="{pad_l}" y1="{pad_t + h}" x2="{pad_l + w}" y2="{pad_t + h}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + h}" stroke="black"/>',
             f'<text x="{pad_l - 4}" y="{pad_t + 4}" text-anchor="end">{top:.3g}</text>',
             f'<text x="{pad_l - 4}" y="{pad_t + h}" text-anchor="end">0</text>']
    if n:
        parts.append(f'<text x="{pad_l}" y="{height - 8}">{_esc(x_labels[0])}</text>')
        parts.append(f'<text x="{pad_l + w}" y="{height - 8}" text-anchor="end">{_esc(x_labels[-1])}</text>')
    for k, (name, (vals, colour)) in enumerate(lines.items()):
        segs, cur = [], []
        for i, v in enumerate(vals):
            if math.isfinite(v):
                cur.append(f"{px(i):.2f},{py(v):.2f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        for seg in segs:
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1" points="{" ".join(seg)}"/>')
        ly = pad_t + 14 * k + 6
        parts.append(f'<line x1="{pad_l + w + 10}" y1="{ly}" x2="{pad_l + w + 30}" y2="{ly}" stroke="{colour}"/>')
        parts.append(f'<text x="{pad_l + w + 34}" y="{ly + 4}">{_esc(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_report(cfg):
    src = _forecast_source(cfg)
    forecasts = _read_forecast_dir(src)
    _provenance(cfg, "report", [src])
    rdir = Path(cfg.out) / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    for sid, recs in forecasts.items():
        models = sorted({r.model_tag for r in recs}, key=lambda m: (m != "dsvm", m))
        stamps = list(dict.fromkeys(r.timestamp for r in recs))
        realized = {}
        vol = {m: {} for m in models}
        for r in recs:
            realized[r.timestamp] = r.realized_return
            vol[r.model_tag][r.timestamp] = r.pred_vol
        with open(rdir / f"{sid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "abs_return"] + [f"vol_{m}" for m in models])
            for t in stamps:
                row = [t, repr(abs(realized[t]))]
                row += ["NA" if not math.isfinite(vol[m].get(t, math.nan)) else repr(vol[m][t]) for m in models]
                w.writerow(row)
        lines = {"|return|": ([abs(realized[t]) for t in stamps], "#999999")}
        for k, m in enumerate(models):
            lines[m] = ([vol[m].get(t, math.nan) for t in stamps], _PALETTE[k % len(_PALETTE)])
        (rdir / f"{sid}.svg").write_text(svg_chart(stamps, lines, f"{sid}: predicted volatility vs |return|"))
    print(f"wrote {len(forecasts)} series reports to {rdir}")


# --- entry point --------------------------------------------------------------


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="volcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data", help="input CSV (or forecast directory for evaluate/report)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--kind", choices=("return", "price"), help="input values are returns or prices")
        p.add_argument("--seed", type=int)
        p.add_argument("--model", action="append", choices=MODELS, dest="models",
                       help="model to forecast with; repeatable")
        p.add_argument("--window", type=int, help="DSVM sequence length T")
        p.add_argument("--garch-window", type=int, dest="garch_window", help="rolling re-estimation window")
        p.add_argument("--samples", type=int, help="predictive samples S")
        p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        p.add_argument("--stride", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float, help="Adam learning rate")
        p.add_argument("--checkpoint", help="model checkpoint path (default: <out>/model.ckpt)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load_config(args.config, overrides)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"volcast: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"volcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, DivergenceError, FloatingPointError) as exc:
        print(f"volcast: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
