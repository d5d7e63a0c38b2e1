#!/usr/bin/env python3
"""
Report Figures
Plotly figures for a finished cross-validation report (the report.json dict).
"""

import json
import logging
from typing import Any, Dict, Optional

import plotly.graph_objects as go
import plotly.utils
from plotly.subplots import make_subplots

from volio import write_json

logger = logging.getLogger(__name__)

FOLD_METRICS = (
    ('recall_global', 'Recall'),
    ('recall_pw_mean', 'Recall-PW'),
    ('dice_mean', 'Dice'),
)


def _percent(value) -> Optional[float]:
    return None if value is None else value * 100.0


def station_recall_figure(report: Dict[str, Any], band: str = 'all') -> go.Figure:
    """Annotated vs detected nodes per primary station"""
    triples = report.get('stratified', {}).get('station_recall', {}).get(band, [])
    stations = [str(code) for code, _, _ in triples]
    detected = [int(d) for _, d, _ in triples]
    totals = [int(t) for _, _, t in triples]

    fig = go.Figure()
    fig.add_trace(go.Bar(x=stations, y=totals, name='Annotated', marker_color='lightgray'))
    fig.add_trace(go.Bar(
        x=stations,
        y=detected,
        name='Detected',
        marker_color='steelblue',
        text=[f"{d}/{t}" for d, t in zip(detected, totals)],
        textposition='outside'
    ))
    title = 'Detection per station' if band == 'all' else f"Detection per station ({band})"
    fig.update_layout(
        title=title,
        xaxis_title='Primary station',
        yaxis_title='Lymph nodes',
        barmode='overlay',
        xaxis={'type': 'category'},
        height=450
    )
    return fig


def station_quality_figure(report: Dict[str, Any]) -> go.Figure:
    """Dice-TP and GT-Perc distributions of detected nodes per station"""
    quality = report.get('station_quality') or {}
    fig = make_subplots(rows=1, cols=2, subplot_titles=('Dice-TP', 'GT-Perc'))
    for code, entry in quality.items():
        label = f"{code} (n={entry['n']})"
        fig.add_trace(go.Box(y=[v * 100.0 for v in entry['dice_tp']], name=label,
                             marker_color='steelblue', showlegend=False), row=1, col=1)
        fig.add_trace(go.Box(y=list(entry['gt_perc']), name=label,
                             marker_color='darkorange', showlegend=False), row=1, col=2)
    fig.update_yaxes(title_text='%', range=[0, 105], row=1, col=1)
    fig.update_yaxes(title_text='%', range=[0, 105], row=1, col=2)
    fig.update_layout(title='Segmentation quality per station', height=450)
    return fig


def fold_metrics_figure(report: Dict[str, Any], config: str) -> go.Figure:
    """Grouped per-fold bars for one configuration, threshold in the tick labels"""
    result = report['configurations'][config]
    folds = result.get('folds', [])
    labels = [f"Fold {i} (PT {pt:.1f})" for i, pt in enumerate(result.get('fold_pts', []))]

    fig = go.Figure()
    for key, name in FOLD_METRICS:
        fig.add_trace(go.Bar(x=labels, y=[_percent(f.get(key)) for f in folds], name=name))
    fig.update_layout(
        title=f"Per-fold metrics: {config}",
        yaxis_title='%',
        yaxis={'range': [0, 105]},
        barmode='group',
        height=400
    )
    return fig


def build_figures(report: Dict[str, Any]) -> Dict[str, go.Figure]:
    figures = {'station_recall': station_recall_figure(report, 'all')}
    if report.get('stratified', {}).get('station_recall', {}).get('ge10'):
        figures['station_recall_ge10'] = station_recall_figure(report, 'ge10')
    if report.get('station_quality'):
        figures['station_quality'] = station_quality_figure(report)
    for config in report.get('configurations', {}):
        figures[f"folds_{config}"] = fold_metrics_figure(report, config)
    logger.debug(f"Built {len(figures)} figures")
    return figures


def figures_payload(figures: Dict[str, go.Figure]) -> Dict[str, Any]:
    """Plain JSON-compatible figure specs"""
    return {name: json.loads(json.dumps(fig, cls=plotly.utils.PlotlyJSONEncoder))
            for name, fig in figures.items()}


def write_figures(figures: Dict[str, go.Figure], path: str) -> None:
    write_json(figures_payload(figures), path)
    logger.info(f"Figures written to {path}")
