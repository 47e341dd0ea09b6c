import json
import time
from contextlib import contextmanager
from datetime import timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Generic, Iterator, Optional, TypeVar

import attrs
import click
import humanize
import numpy as np
import trio
from attrs import define

from risotto.datasets import Dataset, as_images, cifar10_load, synth_blobs
from risotto.initializers import (
    SQRT_HALF,
    BlockSpec,
    InitScheme,
    SchemeKind,
    block_weights_to_json,
    init_block,
)
from risotto.linalg import Array, RngStream
from risotto.network import (
    NetworkSpec,
    Pooling,
    build_network,
    network_jacobian_reports,
)
from risotto.output import (
    COV_COLUMNS,
    DI_COLUMNS,
    LEMMA_COLUMNS,
    NORM_COLUMNS,
    SWEEP_COLUMNS,
    TRAIN_COLUMNS,
    OutputFormat,
    emit,
    render_json,
    sibling,
    write_table,
)
from risotto.sigprop import (
    lemma_scan_parallel,
    mc_cov_trace,
    mc_norm_ratio,
)
from risotto.train import (
    Schedule,
    TrainConfig,
    alpha_sweep,
    repeat_runs,
    sgd_train,
)
from risotto.work import Volume, WorkContext


DI_TOLERANCE = 1e-9


EnumType = TypeVar("EnumType", bound=Enum)


class EnumChoice(click.Choice, Generic[EnumType]):
    def __init__(self, enum: type[EnumType]) -> None:
        self.enum = enum
        choices = [str(e.name) for e in enum]
        self.__values = {e.name: e for e in enum}
        super().__init__(choices)

    def convert(self, value: Any, param: Any, ctx: Any) -> EnumType:
        if isinstance(value, self.enum):
            return value
        return self.__values[super().convert(value, param, ctx)]


class VerificationFailed(click.ClickException):
    exit_code = 2


class RisottoGroup(click.Group):
    """Reports usage errors with exit code 1, leaving 2 to verification
    failures."""

    def make_context(self, *args: Any, **kwargs: Any) -> click.Context:
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


@contextmanager
def config_errors() -> Iterator[None]:
    """Turns invalid configurations found while running into a clean
    exit with status 1."""
    try:
        yield
    except (ValueError, ZeroDivisionError, OSError) as e:
        raise click.ClickException(str(e)) from e


def parse_floats(ctx: Any, param: Any, value: Optional[str]) -> Optional[list[float]]:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"{value!r} is not a comma separated list of numbers")


@define(frozen=True)
class CliConfig:
    """The options shared by every subcommand."""

    scheme: InitScheme
    config: Optional[dict[str, Any]] = None
    depth: int = 4
    width: int = 32
    input_dim: Optional[int] = None
    output_dim: int = 10
    kernel: int = 1
    seed: int = 0
    threads: int = 1
    out: Optional[Path] = None
    format: OutputFormat = OutputFormat.csv
    volume: Volume = Volume.normal

    def work(self) -> WorkContext:
        return WorkContext(
            rng=RngStream(self.seed).substream(0),
            parallelism=self.threads,
            volume=self.volume,
        )

    @property
    def inputs(self) -> RngStream:
        return RngStream(self.seed).substream(1)

    def network(
        self,
        input_dim: Optional[int] = None,
        output_dim: Optional[int] = None,
        spatial: Optional[tuple[int, int]] = None,
    ) -> NetworkSpec:
        if self.config is not None:
            return NetworkSpec.from_dict(self.config.get("network", self.config))
        alpha = self.scheme.alpha
        beta = self.scheme.beta
        if self.scheme.kind == SchemeKind.BALANCED:
            alpha = SQRT_HALF if alpha is None else alpha
            beta = SQRT_HALF if beta is None else beta
        return NetworkSpec.uniform(
            kind=self.scheme.block_kind,
            depth=self.depth,
            width=self.width,
            input_dim=input_dim or self.input_dim or max(self.width // 2, 1),
            output_dim=output_dim or self.output_dim,
            alpha=1.0 if alpha is None else alpha,
            beta=1.0 if beta is None else beta,
            kernel=self.kernel,
            spatial=spatial,
            pooling=Pooling.AVERAGE if spatial is not None else Pooling.NONE,
        )


def _load_config(path: Optional[str]) -> Optional[dict[str, Any]]:
    if path is None:
        return None
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise click.ClickException(f"Could not read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise click.ClickException(f"Config {path} must hold a JSON object")
    return data


def common_options(default_scheme: str = "risotto-c") -> Callable[[Any], Any]:
    options = [
        click.option(
            "--config",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help=(
                "JSON file describing the network. It may also hold \"train\" and "
                "\"dataset\" objects. Flags given on the command line win."
            ),
        ),
        click.option(
            "--scheme",
            type=click.Choice([k.value for k in SchemeKind]),
            default=default_scheme,
            show_default=True,
            help="Initialization scheme.",
        ),
        click.option("--alpha", type=click.FLOAT, default=None, help="Residual branch weight."),
        click.option("--beta", type=click.FLOAT, default=None, help="Skip branch weight."),
        click.option(
            "--depth",
            type=click.IntRange(min=0),
            default=4,
            show_default=True,
            help="Number of residual blocks, unless --config is given.",
        ),
        click.option(
            "--width",
            type=click.IntRange(min=1),
            default=32,
            show_default=True,
            help="Channels of every block, unless --config is given.",
        ),
        click.option(
            "--input-dim",
            type=click.IntRange(min=1),
            default=None,
            help="Input dimension. Defaults to half the width, which keeps looks-linear first layers isometric.",
        ),
        click.option(
            "--kernel",
            type=click.IntRange(min=1),
            default=1,
            show_default=True,
            help="Odd kernel size of every convolution.",
        ),
        click.option(
            "--seed",
            type=click.INT,
            default=0,
            show_default=True,
            help="Master seed for every random stream.",
        ),
        click.option(
            "--threads",
            type=click.IntRange(min=1),
            default=1,
            show_default=True,
            help="Worker threads for sampling. Results do not depend on it.",
        ),
        click.option(
            "--out",
            type=click.Path(dir_okay=False, path_type=Path),
            default=None,
            help="Where to write results. Defaults to stdout.",
        ),
        click.option(
            "--format",
            "fmt",
            type=EnumChoice(OutputFormat),
            default="csv",
            show_default=True,
            help="Output format.",
        ),
        click.option(
            "--volume",
            type=EnumChoice(Volume),
            default="normal",
            show_default=True,
            help="Level of output to provide on stderr.",
        ),
    ]

    def decorate(f: Any) -> Any:
        for option in reversed(options):
            f = option(f)
        return f

    return decorate


def make_config(
    config: Optional[str],
    scheme: str,
    alpha: Optional[float],
    beta: Optional[float],
    depth: int,
    width: int,
    input_dim: Optional[int],
    kernel: int,
    seed: int,
    threads: int,
    out: Optional[Path],
    fmt: OutputFormat,
    volume: Volume,
) -> CliConfig:
    with config_errors():
        parsed = InitScheme.parse(scheme, alpha=alpha, beta=beta)
    return CliConfig(
        scheme=parsed,
        config=_load_config(config),
        depth=depth,
        width=width,
        input_dim=input_dim,
        kernel=kernel,
        seed=seed,
        threads=threads,
        out=out,
        format=fmt,
        volume=volume,
    )


def _elapsed(start: float) -> str:
    return humanize.precisedelta(timedelta(seconds=time.monotonic() - start))


@click.group(cls=RisottoGroup)
@click.version_option(package_name="risotto")
def cli() -> None:
    """Residual network initializations with exact dynamical isometry, and
    the experiments that check them."""


@cli.command("di-verify")
@common_options()
@click.option(
    "--samples",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Number of random inputs to evaluate at.",
)
def di_verify(samples: int, **kwargs: Any) -> None:
    """Reports raw and effective Jacobian spectra of every block. Exits
    with status 2 when a Risotto network is not exactly isometric."""
    cfg = make_config(**kwargs)
    work = cfg.work()
    start = time.monotonic()
    with config_errors():
        spec = cfg.network()
        weights = build_network(spec, cfg.scheme, work.rng)
        rows: list[dict[str, Any]] = []
        documents = []
        for i in range(samples):
            x = cfg.inputs.substream(i).generator().standard_normal(spec.input_shape)
            for block, report in enumerate(network_jacobian_reports(spec, weights, x)):
                effective = report.effective_singular_values
                raw = report.raw_singular_values
                rows.append(
                    {
                        "block": block,
                        "min_effective_sv": None if effective is None else float(effective.min()),
                        "max_effective_sv": None if effective is None else float(effective.max()),
                        "effective_residual": report.effective_residual,
                        "raw_max_sv": float(raw.max()),
                        "raw_zero_svs": int(np.sum(raw < DI_TOLERANCE)),
                        "fd_gap": report.analytic_vs_fd_gap,
                        "ambiguous": report.ambiguous,
                    }
                )
                documents.append(
                    {
                        "input": i,
                        "block": block,
                        "raw_singular_values": raw,
                        "effective_singular_values": effective,
                        "effective_residual": report.effective_residual,
                        "analytic_vs_fd_gap": report.analytic_vs_fd_gap,
                        "ambiguous": report.ambiguous,
                    }
                )
    if cfg.format == OutputFormat.json:
        emit(render_json({"scheme": cfg.scheme.name, "blocks": documents}), cfg.out)
    else:
        write_table(rows, DI_COLUMNS, cfg.out, cfg.format)
    work.info(f"Checked {len(documents)} blocks in {_elapsed(start)}")

    if not cfg.scheme.is_risotto:
        work.note(f"{cfg.scheme.name} is not a Risotto scheme; skipping the isometry check")
        return
    failures = [
        row
        for row in rows
        if row["min_effective_sv"] is None
        or row["min_effective_sv"] < 1 - DI_TOLERANCE
        or row["max_effective_sv"] > 1 + DI_TOLERANCE
    ]
    if failures:
        raise VerificationFailed(
            f"{len(failures)} of {len(rows)} blocks have effective singular values "
            f"outside 1 +/- {DI_TOLERANCE}"
        )
    work.note(f"All {len(rows)} effective Jacobians are isometries")


def correlated_pair(shape: tuple[int, ...], rho: float, rng: RngStream) -> tuple[Array, Array]:
    """Two unit vectors with inner product exactly ``rho``."""
    gen = rng.generator()
    x = gen.standard_normal(shape)
    x /= np.linalg.norm(x)
    y = gen.standard_normal(shape)
    y -= np.sum(x * y) * x
    y /= np.linalg.norm(y)
    return x, rho * x + np.sqrt(1 - rho**2) * y


@cli.command("sigprop")
@common_options(default_scheme="he-normal")
@click.option(
    "--samples",
    type=click.IntRange(min=2),
    default=200,
    show_default=True,
    help="Random initializations to average over.",
)
@click.option(
    "--input-corr",
    type=click.FloatRange(-1, 1),
    default=0.2,
    show_default=True,
    help="Correlation of the two random inputs traced through the network.",
)
@click.option(
    "--cifar",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="A CIFAR-10 binary batch; its first two images become the traced inputs.",
)
@click.option(
    "--bound-c",
    type=click.FLOAT,
    default=0.24,
    show_default=True,
    help="Constant of the covariance lower bound.",
)
def sigprop(
    samples: int, input_corr: float, cifar: Optional[str], bound_c: float, **kwargs: Any
) -> None:
    """Monte-Carlo norm ratio and covariance trace next to their
    theoretical predictions."""
    cfg = make_config(**kwargs)
    work = cfg.work()
    with config_errors():
        if cifar is not None:
            images = as_images(cifar10_load(cifar, limit=2))
            if len(images) < 2:
                raise ValueError(f"{cifar} holds fewer than two images")
            spec = cfg.network(input_dim=3, spatial=(32, 32))
            x, x_tilde = images[0], images[1]
        else:
            spec = cfg.network()
            x, x_tilde = correlated_pair(spec.input_shape, input_corr, cfg.inputs)

        start = time.monotonic()

        @trio.run
        async def _() -> None:
            norm = await mc_norm_ratio(spec, cfg.scheme, x, samples, work)
            trace = await mc_cov_trace(spec, cfg.scheme, x, x_tilde, samples, work, c=bound_c)
            norm_row = {
                "scheme": cfg.scheme.name,
                "L": spec.depth,
                "width": spec.width,
                "mean": norm.mean,
                "stderr": norm.stderr,
                "theory": norm.theory,
            }
            cov_rows = [attrs.asdict(layer) for layer in trace.layers]
            if cfg.format == OutputFormat.json:
                emit(
                    render_json(
                        {
                            "norm": norm_row,
                            "covariance": {
                                "input_corr": trace.input_corr,
                                "effective_drift": trace.effective_drift,
                                "layers": cov_rows,
                            },
                        }
                    ),
                    cfg.out,
                )
            else:
                write_table([norm_row], NORM_COLUMNS, cfg.out, cfg.format)
                if cfg.out is None:
                    click.echo()
                write_table(cov_rows, COV_COLUMNS, sibling(cfg.out, "cov", ".csv"), cfg.format)
            if trace.effective_drift is not None:
                work.info(f"Largest effective correlation drift: {trace.effective_drift:.3g}")

    work.note(f"Sampled {samples} networks twice in {_elapsed(start)}")


@cli.command("lemma")
@click.option(
    "--grid",
    type=click.IntRange(min=2),
    default=21,
    show_default=True,
    help="Number of evenly spaced correlations in [-1, 1].",
)
@click.option(
    "--samples",
    type=click.IntRange(min=0),
    default=100_000,
    show_default=True,
    help="Monte-Carlo samples per grid point; 0 skips the check.",
)
@click.option("--seed", type=click.INT, default=0, show_default=True, help="Master seed.")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Worker threads for sampling. Results do not depend on it.",
)
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Where to write results. Defaults to stdout.",
)
@click.option("--format", "fmt", type=EnumChoice(OutputFormat), default="csv", show_default=True)
@click.option("--volume", type=EnumChoice(Volume), default="normal", show_default=True)
def lemma(
    grid: int,
    samples: int,
    threads: int,
    seed: int,
    out: Optional[Path],
    fmt: OutputFormat,
    volume: Volume,
) -> None:
    """Tabulates the ReLU covariance function and its constant c(rho)."""
    work = WorkContext(rng=RngStream(seed), parallelism=threads, volume=volume)
    grid_points = [float(rho) for rho in np.linspace(-1.0, 1.0, grid)]
    with config_errors():
        scan = trio.run(lemma_scan_parallel, grid_points, samples, work)
    write_table([attrs.asdict(row) for row in scan.rows], LEMMA_COLUMNS, out, fmt)
    work.note(f"c ranges over [{scan.min_c:.6f}, {scan.max_c:.6f}] on this grid")


def _dataset(
    cfg: CliConfig,
    name: Optional[str],
    path: Optional[str],
    limit: Optional[int],
    input_dim: int,
) -> Dataset:
    options = dict((cfg.config or {}).get("dataset", {}))
    name = name or options.pop("name", "blobs")
    path = path or options.pop("path", None)
    limit = limit or options.pop("limit", None)
    for key in ("name", "path", "limit"):
        options.pop(key, None)
    if name == "cifar10":
        if path is None:
            raise ValueError("The cifar10 dataset needs a path")
        return cifar10_load(path, limit=limit)
    if name != "blobs":
        raise ValueError(f"Unknown dataset {name!r}")
    params = {"n_classes": 2, "dim": input_dim, "n_per_class": 500, "spread": 0.5}
    params.update(options)
    return synth_blobs(rng=RngStream(cfg.seed).substream(2), **params)


def _train_config(cfg: CliConfig, overrides: dict[str, Any]) -> TrainConfig:
    values = {"learning_rate": 0.1, "seed": cfg.seed}
    values.update((cfg.config or {}).get("train", {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def training_options(f: Any) -> Any:
    options = [
        click.option(
            "--dataset",
            type=click.Choice(["blobs", "cifar10"]),
            default=None,
            help="Training data. Defaults to two Gaussian blobs.",
        ),
        click.option(
            "--data-path",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="CIFAR-10 binary batch to train on.",
        ),
        click.option("--limit", type=click.IntRange(min=1), default=None, help="Use only this many records."),
        click.option("--lr", "learning_rate", type=click.FLOAT, default=None, help="Learning rate [default: 0.1]."),
        click.option("--momentum", type=click.FLOAT, default=None, help="Momentum [default: 0.9]."),
        click.option("--weight-decay", type=click.FLOAT, default=None, help="Weight decay [default: 0.0005]."),
        click.option(
            "--schedule",
            type=click.Choice([s.value for s in Schedule]),
            default=None,
            help="Learning rate schedule [default: cosine].",
        ),
        click.option("--epochs", type=click.IntRange(min=1), default=None, help="Epochs [default: 10]."),
        click.option("--batch-size", type=click.IntRange(min=1), default=None, help="Batch size [default: 32]."),
        click.option("--max-steps", type=click.IntRange(min=1), default=None, help="Stop after this many SGD steps."),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _split_training_kwargs(kwargs: dict[str, Any]) -> tuple[dict[str, Any], dict[str, Any]]:
    train_keys = ("learning_rate", "momentum", "weight_decay", "schedule", "epochs", "batch_size", "max_steps")
    data_keys = ("dataset", "data_path", "limit")
    train = {k: kwargs.pop(k) for k in train_keys}
    data = {k: kwargs.pop(k) for k in data_keys}
    return train, data


@cli.command("train")
@common_options()
@training_options
@click.option(
    "--runs",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Independent runs. With more than one, reports mean accuracy and a 95% interval.",
)
@click.option(
    "--test-fraction",
    type=click.FloatRange(0, 1, min_open=True, max_open=True),
    default=None,
    help="Hold out this fraction of the data for test accuracy.",
)
def train(runs: int, test_fraction: Optional[float], **kwargs: Any) -> None:
    """Trains a fully connected network with SGD and writes the loss log
    and a JSON summary."""
    train_overrides, data_options = _split_training_kwargs(kwargs)
    cfg = make_config(**kwargs)
    work = cfg.work()
    with config_errors():
        data = _dataset(
            cfg,
            data_options["dataset"],
            data_options["data_path"],
            data_options["limit"],
            cfg.network().input_dim,
        )
        test = None
        if test_fraction is not None:
            data, test = data.split(test_fraction, RngStream(cfg.seed).substream(3))
        spec = cfg.network(input_dim=data.dim, output_dim=data.n_classes)
        train_cfg = _train_config(cfg, train_overrides)
        start = time.monotonic()
        if runs > 1:
            summary = trio.run(repeat_runs, spec, cfg.scheme, data, train_cfg, runs, work, test)
            emit(render_json(attrs.asdict(summary)), cfg.out)
            work.note(
                f"{runs} runs in {_elapsed(start)}: accuracy "
                f"{summary.mean:.4f} +/- {summary.half_width:.4f}"
            )
            return
        log = sgd_train(spec, cfg.scheme, data, train_cfg, test=test, work=work)
    rows = [
        {"step": step, "lr": lr, "loss": loss}
        for step, (lr, loss) in enumerate(zip(log.learning_rates, log.losses))
    ]
    document = dict(log.summary(), scheme=cfg.scheme.name, config=attrs.asdict(train_cfg))
    if cfg.format == OutputFormat.json:
        emit(render_json(dict(document, log=rows)), cfg.out)
    else:
        write_table(rows, TRAIN_COLUMNS, cfg.out, cfg.format)
        summary_path = sibling(cfg.out, "summary", ".json")
        if summary_path is None:
            work.note(render_json(document).strip())
        else:
            emit(render_json(document), summary_path)
    if log.diverged:
        work.warn("The run diverged")
    work.note(f"Trained for {log.steps} steps in {_elapsed(start)}, final loss {log.final_loss:.4g}")


@cli.command("alpha-sweep")
@common_options()
@training_options
@click.option(
    "--alphas",
    callback=parse_floats,
    default="0,0.25,0.5,1",
    show_default=True,
    help="Comma separated initial alphas.",
)
def alpha_sweep_command(alphas: list[float], **kwargs: Any) -> None:
    """Trains one Risotto network per initial alpha from the same seed."""
    train_overrides, data_options = _split_training_kwargs(kwargs)
    cfg = make_config(**kwargs)
    work = cfg.work()
    with config_errors():
        data = _dataset(
            cfg,
            data_options["dataset"],
            data_options["data_path"],
            data_options["limit"],
            cfg.network().input_dim,
        )
        spec = cfg.network(input_dim=data.dim, output_dim=data.n_classes)
        train_cfg = _train_config(cfg, train_overrides)
        rows = trio.run(alpha_sweep, spec, cfg.scheme, alphas, data, train_cfg, work)
    write_table([attrs.asdict(row) for row in rows], SWEEP_COLUMNS, cfg.out, cfg.format)


@cli.command("init-dump")
@click.option(
    "--scheme",
    type=click.Choice([k.value for k in SchemeKind]),
    default="risotto-c",
    show_default=True,
    help="Initialization scheme.",
)
@click.option("--alpha", type=click.FLOAT, default=None, help="Residual branch weight.")
@click.option("--beta", type=click.FLOAT, default=None, help="Skip branch weight.")
@click.option("--width", type=click.IntRange(min=1), default=8, show_default=True, help="Block width.")
@click.option("--kernel", type=click.IntRange(min=1), default=1, show_default=True, help="Odd kernel size.")
@click.option(
    "--depth",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    help="Network depth, for depth-scaled schemes.",
)
@click.option("--seed", type=click.INT, default=0, show_default=True, help="Master seed.")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, path_type=Path),
    default=None,
    help="Where to write the JSON document. Defaults to stdout.",
)
def init_dump(
    scheme: str,
    alpha: Optional[float],
    beta: Optional[float],
    width: int,
    kernel: int,
    depth: int,
    seed: int,
    out: Optional[Path],
) -> None:
    """Writes one initialized block, with the matrices a Risotto block is
    built from, as JSON."""
    with config_errors():
        parsed = InitScheme.parse(scheme, alpha=alpha, beta=beta)
        default_branch = SQRT_HALF if parsed.kind == SchemeKind.BALANCED else 1.0
        spec = BlockSpec(
            parsed.block_kind,
            width,
            width,
            width,
            k1=kernel,
            k2=kernel,
            alpha=default_branch if alpha is None else alpha,
            beta=default_branch if beta is None else beta,
        )
        weights = init_block(spec, parsed, RngStream(seed), total_depth=depth)
    emit(render_json(block_weights_to_json(weights, spec, seed)), out)


def main() -> None:
    cli(prog_name="risotto", auto_envvar_prefix="RISOTTO")


if __name__ == "__main__":  # pragma: no cover
    main()
