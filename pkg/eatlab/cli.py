"""
Command-line interface.

    eatlab gen-data  -> dataset container + PCA basis
    eatlab critics   -> metric models trained on oracle data
    eatlab pretrain  -> A2ET backbone checkpoint
    eatlab adapt     -> adaptation checkpoint against a frozen backbone
    eatlab ablate    -> ablation table over one configuration matrix
    eatlab eval      -> metric report
    eatlab edit      -> zero-shot expression edit toward an emotion word
    eatlab params    -> parameter accounting
    eatlab serve     -> read-only HTTP run browser
"""

import functools
import json
import logging
import os
from typing import Optional, Tuple

import click
from pydantic import ValidationError

from eatlab.core import synthworld
from eatlab.errors import EatlabError
from eatlab.models.config import A2etConfig, AdaptConfig, LossWeights, RunConfig, WorldConfig

logger = logging.getLogger("eatlab.cli")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def guarded(fn):
    """Turn package and validation errors into a one-line message and exit status 1"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as e:
            logger.error(f"Invalid configuration: {e}")
            raise click.ClickException(f"invalid configuration: {e}") from e
        except EatlabError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise click.ClickException(str(e)) from e

    return wrapper


def _split_list(value: Optional[str]):
    return [v.strip() for v in value.split(",") if v.strip()] if value else None


def dataset_option(fn):
    return click.option("--dataset", "dataset_dir", envvar="EATLAB_DATA_DIR", required=True,
                        type=click.Path(file_okay=False), help="Dataset container (default $EATLAB_DATA_DIR)")(fn)


def run_options(fn):
    """Options every training or evaluation run shares"""
    options = [
        click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Run directory"),
        click.option("--seed", default=0, show_default=True, help="Seed for every random draw of the run"),
        click.option("--device", default="cpu", show_default=True, help="torch device"),
        click.option("--critics", "critics_dir", type=click.Path(file_okay=False), default=None,
                     help="Metric models from `eatlab critics`"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return dataset_option(fn)


def budget_options(default_steps: int):
    def decorate(fn):
        options = [
            click.option("--steps", default=default_steps, show_default=True, help="Optimizer steps"),
            click.option("--batch-clips", default=2, show_default=True, help="Clips per step"),
            click.option("--centers-per-clip", default=11, show_default=True,
                         help="Consecutive centre frames per clip"),
            click.option("--log-every", default=100, show_default=True),
            click.option("--lambda-lat", default=1.0, show_default=True),
            click.option("--lambda-sync", default=0.3, show_default=True),
            click.option("--lambda-rec", default=1.0, show_default=True),
        ]
        for option in reversed(options):
            fn = option(fn)
        return fn

    return decorate


def adapt_options(fn):
    options = [
        click.option("--backbone", "backbone_dir", required=True, type=click.Path(exists=True, file_okay=False)),
        click.option("--prompt-depth", type=click.Choice(["none", "shallow", "deep"]), default="deep",
                     show_default=True),
        click.option("--prompt-site", type=click.Choice(["encoder", "decoder", "both"]), default="encoder",
                     show_default=True),
        click.option("--edn/--no-edn", "use_edn", default=True, show_default=True),
        click.option("--eam/--no-eam", "use_eam", default=True, show_default=True),
        click.option("--edn-init", type=click.Choice(["a2et", "random"]), default="a2et", show_default=True),
        click.option("--data-fraction", type=click.Choice(["0.25", "0.5", "1.0"]), default="1.0", show_default=True),
        click.option("--held-out", multiple=True, help="Emotion excluded from adaptation (repeatable)"),
        click.option("--eval-interval", default=500, show_default=True),
        click.option("--val-clips", default=16, show_default=True),
        click.option("--expected-backbone-hash", default=None, help="Refuse any other backbone"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _weights(kw) -> LossWeights:
    return LossWeights(lat=kw.pop("lambda_lat"), sync=kw.pop("lambda_sync"), rec=kw.pop("lambda_rec"))


def _backbone_a2et(backbone_dir: str) -> A2etConfig:
    from eatlab.services.checkpoints import read_checkpoint_manifest

    return A2etConfig.model_validate(read_checkpoint_manifest(backbone_dir).config["a2et"])


def _adapt_config(stage: str, kw) -> Tuple[RunConfig, str]:
    adapt = AdaptConfig(
        prompt_depth=kw.pop("prompt_depth"),
        prompt_site=kw.pop("prompt_site"),
        use_edn=kw.pop("use_edn"),
        use_eam=kw.pop("use_eam"),
        edn_init=kw.pop("edn_init"),
    )
    backbone_dir = kw.pop("backbone_dir")
    return RunConfig(
        stage=stage,
        a2et=_backbone_a2et(backbone_dir),
        adapt=adapt,
        weights=_weights(kw),
        data_fraction=float(kw.pop("data_fraction")),
        held_out_emotions=list(kw.pop("held_out")),
        **kw,
    ), backbone_dir


@click.group()
@click.option("--log-level", envvar="EATLAB_LOG_LEVEL", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level: str) -> None:
    """Emotional adaptation of an audio-driven talking head on a synthetic world"""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT)


@cli.command("gen-data")
@click.option("--identities", default=20, show_default=True)
@click.option("--clips-per-identity", default=8, show_default=True)
@click.option("--frames", default=50, show_default=True)
@click.option("--emotions", default=None, help="Comma-separated labels (default: all eight)")
@click.option("--intensities", default="1.0", show_default=True, help="Comma-separated levels in [0, 1]")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", envvar="EATLAB_DATA_DIR", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, help="Generator processes")
@click.option("--test-fraction", default=0.2, show_default=True, help="Share of identities held out")
@click.option("--pca-dim", default=32, show_default=True, help="Components of the PCA basis")
@click.option("--dump-features", is_flag=True, help="Also write mel/MFCC/pose features")
@guarded
def gen_data(identities, clips_per_identity, frames, emotions, intensities, seed, out_dir, workers, test_fraction,
             pca_dim, dump_features):
    """Generate a synthetic dataset and fit the PCA basis on its training identities"""
    from eatlab.services import dataset as ds

    world_kw = {"emotions": _split_list(emotions)} if emotions else {}
    world = WorldConfig(
        identities=identities,
        clips_per_identity=clips_per_identity,
        frames=frames,
        intensities=[float(v) for v in _split_list(intensities)],
        seed=seed,
        test_fraction=test_fraction,
        **world_kw,
    )
    clips = synthworld.generate_clips(world, workers)
    manifest = ds.export_dataset(clips, out_dir, world)
    split = {c.identity_id: c.split for c in manifest.clips}
    basis, fit_fp = ds.fit_basis(clips, split, pca_dim)
    ds.save_basis(basis, out_dir, fit_fp)
    if dump_features:
        ds.dump_features(ds.SyntheticDataset(out_dir))
    click.echo(f"{len(clips)} clips -> {out_dir} (fingerprint {manifest.fingerprint})")


@cli.command()
@run_options
@budget_options(1500)
@guarded
def critics(**kw):
    """Train the sync expert, emotion classifier and text-image embedder on oracle data"""
    from eatlab.services.trainer import train_critics

    kw.pop("critics_dir")
    config = RunConfig(stage="critics", weights=_weights(kw), **kw)
    manifest = train_critics(config)
    click.echo(json.dumps(manifest.model_extra.get("quality", {}), indent=2, sort_keys=True))


@cli.command()
@run_options
@budget_options(20000)
@click.option("--phase1-fraction", default=0.5, show_default=True, help="Share of steps on latent loss only")
@click.option("--layers", default=6, show_default=True, help="Encoder and decoder layers")
@click.option("--heads", default=8, show_default=True)
@click.option("--token-dim", default=128, show_default=True)
@click.option("--ff-dim", default=1024, show_default=True)
@click.option("--half-width", default=4, show_default=True)
@click.option("--pca-dim", default=None, type=int, help="Default: the dataset basis dimension")
@guarded
def pretrain(layers, heads, token_dim, ff_dim, half_width, pca_dim, **kw):
    """Pretrain the A2ET backbone on neutral speech"""
    from eatlab.services.dataset import load_basis
    from eatlab.services.trainer import pretrain as run_pretrain

    if pca_dim is None:
        pca_dim = load_basis(kw["dataset_dir"])[0].dim
    a2et = A2etConfig(layers_enc=layers, layers_dec=layers, heads=heads, token_dim=token_dim, ff_dim=ff_dim,
                      half_width=half_width, pca_dim=pca_dim)
    config = RunConfig(stage="pretrain", a2et=a2et, weights=_weights(kw), **kw)
    manifest = run_pretrain(config)
    click.echo(f"backbone {manifest.fingerprint} -> {config.out_dir}")


@cli.command()
@run_options
@budget_options(4000)
@adapt_options
@guarded
def adapt(**kw):
    """Train the emotional adaptation modules against a frozen backbone"""
    from eatlab.services.trainer import adapt as run_adapt

    config, backbone_dir = _adapt_config("adapt", kw)
    manifest = run_adapt(config, backbone_dir)
    click.echo(f"adaptation {manifest.fingerprint} (backbone {manifest.upstream_hash}) -> {config.out_dir}")


@cli.command()
@run_options
@budget_options(4000)
@adapt_options
@click.option("--matrix", type=click.Choice(["prompt-depth", "components", "edn-init", "data-fraction"]),
              required=True)
@click.option("--workers", default=1, show_default=True, help="Cells run in parallel processes")
@guarded
def ablate(matrix, workers, **kw):
    """Adapt and evaluate every cell of an ablation matrix"""
    from eatlab.services.ablation import ABLATION_TXT, run_ablation

    config, backbone_dir = _adapt_config("adapt", kw)
    run_ablation(config, backbone_dir, matrix, workers)
    with open(os.path.join(config.out_dir, ABLATION_TXT), encoding="utf-8") as f:
        click.echo(f.read(), nl=False)


@cli.command("eval")
@run_options
@click.option("--backbone", "backbone_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--adaptation", "adaptation_dir", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--held-out", multiple=True, help="Emotion left out of the report (repeatable)")
@click.option("--png", is_flag=True, help="Write a GT/prediction frame grid")
@click.option("--label", default=None, help="Row label of the report table")
@click.option("--expected-backbone-hash", default=None)
@guarded
def evaluate(backbone_dir, adaptation_dir, split, held_out, png, label, **kw):
    """Evaluate a pretrained or adapted model and write the metric report"""
    from eatlab.services.trainer import REPORT_TXT, evaluate as run_evaluate

    config = RunConfig(stage="eval", a2et=_backbone_a2et(backbone_dir), held_out_emotions=list(held_out), **kw)
    run_evaluate(config, backbone_dir, adaptation_dir, split=split, png=png, label=label)
    with open(os.path.join(config.out_dir, REPORT_TXT), encoding="utf-8") as f:
        click.echo(f.read(), nl=False)


@cli.command()
@run_options
@budget_options(500)
@click.option("--backbone", "backbone_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--adaptation", "adaptation_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--text", "edit_text", default="surprised", show_default=True, help="Target emotion word")
@click.option("--head-init", "edit_head_init", type=click.Choice(["neutral", "random"]), default="neutral",
              show_default=True)
@click.option("--source-clip", default=None, type=int, help="Edit this clip only")
@guarded
def edit(backbone_dir, adaptation_dir, source_clip, **kw):
    """Zero-shot expression editing toward an emotion word"""
    from eatlab.services.editing import edit_zero_shot

    config = RunConfig(stage="edit", a2et=_backbone_a2et(backbone_dir), weights=_weights(kw), **kw)
    report = edit_zero_shot(config, backbone_dir, adaptation_dir, source_clip)
    click.echo(f"'{report.text}': source {report.source_acc:.2f}%  transfer {report.transfer_acc:.2f}%")


@cli.command()
@click.option("--backbone", "backbone_dir", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--adaptation", "adaptation_dir", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON")
@guarded
def params(backbone_dir, adaptation_dir, as_json):
    """Parameter accounting; untrained default models when no checkpoints are given"""
    from eatlab.services.accounting import format_params, fresh_models, params_report
    from eatlab.services.checkpoints import load_adaptation, load_backbone

    if adaptation_dir is not None and backbone_dir is None:
        raise click.UsageError("--adaptation needs --backbone")
    if backbone_dir is None:
        backbone, adapter = fresh_models()
    else:
        backbone, _ = load_backbone(backbone_dir)
        if adaptation_dir is not None:
            adapter, _ = load_adaptation(adaptation_dir, backbone, backbone_dir)
        else:
            _, adapter = fresh_models(backbone.config)
    report = params_report(backbone, adapter)
    click.echo(json.dumps(report.model_dump(), indent=2, sort_keys=True) if as_json else format_params(report),
               nl=as_json)


@cli.command()
@click.option("--runs", "runs_dir", envvar="EATLAB_RUNS_DIR", default="runs", show_default=True,
              type=click.Path(file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=3000, show_default=True)
def serve(runs_dir, host, port):
    """Serve run manifests and reports over HTTP"""
    from eatlab.main import serve as run_server

    os.environ["EATLAB_RUNS_DIR"] = os.path.abspath(runs_dir)
    run_server(host, port)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
