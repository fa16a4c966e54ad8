"""HTTP facade over a frozen model snapshot.

Endpoints, JSON on the wire:

* ``GET  /scenes``                — id listing for scene pickers
* ``GET  /scene/{id}``            — scene/v1 document (ground truth included
                                    when the stored scene has one)
* ``GET  /scene/{id}/intents``    — the intention-token bank for the ego
* ``GET  /scene/{id}/predict``    — pred/v1 joint prediction conditioned on
                                    ``?token=k`` with optional ``&refine=``
* ``POST /scene``                 — upload a custom scene, returns its id

Prediction on a frozen model is pure, so requests may run concurrently; a
semaphore caps how many heavy predictions are in flight at once.  Swapping
the model replaces the whole snapshot in one assignment — a handler keeps
whichever snapshot it grabbed at entry, so it sees old or new, never a mix.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from fastapi import Body, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from .encoder import pack_scenes
from .metrics import EvalRecord, Prediction, evaluate_sample
from .model import JointPrediction, ModelState, predict, propose
from .scene import (PRED_FORMAT, Episode, Scene, episode_to_json, json_sha256,
                    scene_from_json, scene_to_json)

MAX_INFLIGHT_PREDICTIONS = 4


@dataclass(frozen=True)
class SceneEntry:
    scene: Scene
    episode: Episode | None     # set when ground truth accompanies the scene

    @property
    def doc(self) -> dict[str, Any]:
        if self.episode is not None:
            return episode_to_json(self.episode)
        return scene_to_json(self.scene)


@dataclass(frozen=True)
class Snapshot:
    """Everything a request handler reads, replaced atomically as a whole."""

    state: ModelState
    entries: dict[str, SceneEntry]
    order: tuple[str, ...]


def _entry_id(entry: SceneEntry) -> str:
    return json_sha256(entry.doc)[:12]


def _make_entry(item: Episode | Scene) -> SceneEntry:
    if isinstance(item, Episode):
        return SceneEntry(scene=item.scene, episode=item)
    return SceneEntry(scene=item, episode=None)


def _metrics_json(record: EvalRecord) -> dict[str, Any]:
    return {
        "minADE": record.minADE,
        "minFDE": record.minFDE,
        "MR": record.miss,
        "OR": record.minOR,
        "AP": record.ap,
        "f_ADE": record.f_ADE,
        "f_FDE": record.f_FDE,
        "f_MR": record.f_miss,
        "f_OR": record.f_OR,
        "labels": [bool(v) for v in record.labels],
        "ranking": [int(v) for v in record.ranking],
    }


def _prediction_json(pred: JointPrediction) -> dict[str, Any]:
    return {
        "format": PRED_FORMAT,
        "token_index": pred.token.index,
        "refined": pred.refined,
        "padded": pred.padded,
        "scenes": [
            {"score": float(score), "futures": futures.tolist()}
            for score, futures in zip(pred.probs, pred.candidates)
        ],
        "exposures": [float(e) for e in pred.exposures],
        "reports": [r.to_json() for r in pred.reports],
        "raw_reports": [r.to_json() for r in pred.raw_reports],
    }


def swap_model(app: FastAPI, state: ModelState) -> None:
    """Install a new frozen model; scenes carry over, swap is atomic."""
    with app.state.write_lock:
        app.state.snapshot = replace(app.state.snapshot, state=state)


def build_app(state: ModelState, episodes: Sequence[Episode | Scene] = (),
              max_inflight: int = MAX_INFLIGHT_PREDICTIONS,
              ui_dir: str | Path | None = None) -> FastAPI:
    entries: dict[str, SceneEntry] = {}
    order: list[str] = []
    for item in episodes:
        entry = _make_entry(item)
        sid = _entry_id(entry)
        if sid not in entries:
            order.append(sid)
        entries[sid] = entry

    app = FastAPI(title="lotcast")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"],
        allow_methods=["GET", "POST"], allow_headers=["*"])
    app.state.snapshot = Snapshot(state=state, entries=entries,
                                  order=tuple(order))
    app.state.write_lock = threading.Lock()
    app.state.predict_gate = threading.Semaphore(max_inflight)

    def lookup(sid: str) -> tuple[Snapshot, SceneEntry]:
        snap: Snapshot = app.state.snapshot
        entry = snap.entries.get(sid)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown scene {sid!r}")
        return snap, entry

    @app.get("/scenes")
    def list_scenes() -> dict[str, Any]:
        snap: Snapshot = app.state.snapshot
        return {
            "scenes": [
                {
                    "id": sid,
                    "n_agents": snap.entries[sid].scene.n_agents,
                    "has_gt": snap.entries[sid].episode is not None,
                }
                for sid in snap.order
            ]
        }

    @app.get("/scene/{sid}")
    def get_scene(sid: str) -> dict[str, Any]:
        _, entry = lookup(sid)
        return {"id": sid, **entry.doc}

    @app.get("/scene/{sid}/intents")
    def get_intents(sid: str) -> dict[str, Any]:
        snap, entry = lookup(sid)
        batch = pack_scenes([entry.scene])
        tokens = propose(snap.state, batch, 0)
        ends = batch.to_source(
            np.stack([t.endpoint for t in tokens])[None])[0]
        return {
            "scene": sid,
            "k_intent": len(tokens),
            "tokens": [
                {"index": t.index, "endpoint": ends[i].tolist(),
                 "prob": float(t.prob)}
                for i, t in enumerate(tokens)
            ],
        }

    @app.get("/scene/{sid}/predict")
    def get_prediction(sid: str, token: int | None = None,
                       refine: bool = True) -> dict[str, Any]:
        snap, entry = lookup(sid)
        with app.state.predict_gate:
            try:
                pred = predict(snap.state, entry.scene, token_index=token,
                               refine_output=refine)
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
        doc = {"scene": sid, **_prediction_json(pred)}
        if entry.episode is not None:
            record = evaluate_sample(
                Prediction(candidates=pred.candidates, probs=pred.probs),
                entry.episode, threshold=snap.state.cfg.miss_threshold)
            doc["metrics"] = _metrics_json(record)
        return doc

    @app.post("/scene")
    def post_scene(doc: dict[str, Any] = Body(...)) -> dict[str, Any]:
        try:
            scene = scene_from_json(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400,
                                detail=f"invalid scene document: {exc}")
        entry = SceneEntry(scene=scene, episode=None)
        sid = _entry_id(entry)
        with app.state.write_lock:
            snap: Snapshot = app.state.snapshot
            if sid not in snap.entries:
                app.state.snapshot = Snapshot(
                    state=snap.state,
                    entries={**snap.entries, sid: entry},
                    order=snap.order + (sid,))
        return {"id": sid}

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")

    return app
