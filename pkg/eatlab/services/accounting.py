"""Parameter accounting of the backbone and the adaptation groups."""

from typing import Optional, Tuple

from eatlab.core.a2et import A2etModel, count_parameters
from eatlab.core.emoadapt import EmotionAdapter
from eatlab.models.config import A2etConfig, AdaptConfig
from eatlab.models.report import ParamGroup, ParamsReport


def params_report(backbone: A2etModel, adapter: EmotionAdapter) -> ParamsReport:
    """Exact trainable counts per adaptation group as a share of the full backbone"""
    total = count_parameters(backbone)
    pct = lambda n: 100.0 * n / total
    groups = {}
    for name, params in adapter.parameter_groups().items():
        count = sum(p.numel() for p in params)
        groups[name] = ParamGroup(count=count, percent=pct(count))
    added = sum(g.count for g in groups.values())
    return ParamsReport(
        backbone=total,
        groups=groups,
        total_added=ParamGroup(count=added, percent=pct(added)),
    )


def fresh_models(a2et: Optional[A2etConfig] = None,
                 adapt: Optional[AdaptConfig] = None) -> Tuple[A2etModel, EmotionAdapter]:
    """Untrained backbone and adapter, for accounting without checkpoints"""
    a2et = a2et or A2etConfig()
    adapt = adapt or AdaptConfig()
    backbone = A2etModel(a2et)
    return backbone, EmotionAdapter(adapt, a2et, backbone if adapt.edn_init == "a2et" else None)


def format_params(report: ParamsReport) -> str:
    rows = [("backbone", report.backbone, 100.0)]
    rows += [(name, g.count, g.percent) for name, g in report.groups.items()]
    rows.append(("total added", report.total_added.count, report.total_added.percent))
    width = max(len(r[0]) for r in rows)
    lines = [f"{name.ljust(width)}  {count:>10d}  {percent:7.2f}%" for name, count, percent in rows]
    return "\n".join(lines) + "\n"
