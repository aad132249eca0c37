"""
Federated training simulation for fogpipe.

Subjects are dealt into client shards, every client trains a copy of the
global model on its own windows, and the server combines the client
weights with a sample-count weighted average (FedAvg). All clients take
part in every round.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fogpipe.core.errors import BadConfig, EmptyShard, EmptyUpdateList, ShapeMismatch, TooFewSubjects
from fogpipe.core.gaf import GafTensorSet
from fogpipe.core.model import (
    FORMAT_VERSION,
    ModelConfig,
    TrainedModel,
    build_graph,
    check_batchable,
    fit_epochs,
    predict_proba,
    trainable_subset,
)
from fogpipe.core.nn import ParamSet, ParamTensor
from fogpipe.core.seeding import derive_seed
from fogpipe.core.windowing import WindowSet

logger = logging.getLogger(__name__)

Update = Tuple[ParamSet, int]


@dataclass
class ClientShard:
    """Training windows of the subjects assigned to one client."""

    client_id: int
    subjects: Tuple[str, ...]
    data: GafTensorSet

    @property
    def n_k(self) -> int:
        return len(self.data)


@dataclass
class RoundConfig:
    """Federated schedule."""

    num_clients: int = 5
    local_epochs: int = 2
    rounds: int = 30
    seed: int = 42
    # every client draws from training stream 0 instead of its own
    shared_stream: bool = False
    workers: int = 1

    def validate(self) -> None:
        if self.num_clients < 1:
            raise BadConfig(f"num_clients must be >= 1, got {self.num_clients}")
        if self.rounds < 1:
            raise BadConfig(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise BadConfig(f"local_epochs must be >= 0, got {self.local_epochs}")


@dataclass
class RoundRecord:
    round: int
    client_id: int
    n_k: int
    local_loss: Optional[float]
    global_val_f1: Optional[float]


@dataclass
class FederatedResult:
    model: TrainedModel
    history: List[RoundRecord] = field(default_factory=list)


def _restrict(data: Union[GafTensorSet, WindowSet], subjects: Sequence[str]):
    if isinstance(data, WindowSet):
        return data.subset(subjects)
    return data.subset_subjects(subjects)


def partition_clients(data: GafTensorSet, k: int = 5, seed: int = 0) -> List[ClientShard]:
    """
    Deal subjects into ``k`` client shards.

    Subjects are sorted, shuffled with ``derive_seed(seed, "partition")`` and
    assigned round-robin, so client ``c`` receives shuffled positions
    ``c, c + k, c + 2k, ...``.

    Raises:
        TooFewSubjects: If there are fewer subjects than clients
    """
    subjects = data.subjects() if callable(getattr(data, "subjects", None)) else data.subjects
    subjects = sorted(subjects)
    if k < 1 or len(subjects) < k:
        raise TooFewSubjects(f"{len(subjects)} subjects cannot fill {k} clients")
    order = np.random.default_rng(derive_seed(seed, "partition")).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    shards = []
    for client_id in range(k):
        assigned = tuple(sorted(shuffled[client_id::k]))
        shards.append(ClientShard(client_id=client_id, subjects=assigned, data=_restrict(data, assigned)))
        logger.debug("client %d: %d subjects, %d windows", client_id, len(assigned), len(shards[-1].data))
    return shards


def local_update(
    global_params: ParamSet,
    shard: ClientShard,
    local_epochs: int,
    cfg: ModelConfig,
    round_index: int = 0,
    stream_index: Optional[int] = None,
) -> Tuple[ParamSet, int, Optional[float]]:
    """
    Train a copy of the global weights on one shard.

    The client trains with stream ``derive_seed(cfg.seed, "train", client_id)``
    and global epoch numbers ``round_index * local_epochs + e``, so a single
    client holding all data follows exactly the centralised schedule.

    Returns:
        (client weights, n_k, mean loss of the last local epoch)

    Raises:
        EmptyShard: If the shard has no usable windows
        DegenerateBatch: If the shard has a single usable window
    """
    data = trainable_subset(shard.data, cfg.channels)
    if len(data) == 0:
        raise EmptyShard(f"client {shard.client_id} has no training windows")
    check_batchable(len(data), local_epochs, f"client {shard.client_id}")
    if local_epochs == 0:
        return global_params.copy(), len(data), None

    network = build_graph(cfg)
    network.parameters().load_values(global_params.values())
    stream = derive_seed(cfg.seed, "train", shard.client_id if stream_index is None else stream_index)
    history = fit_epochs(network, data, cfg, local_epochs, stream, first_epoch=round_index * local_epochs)
    return network.parameters().copy(), len(data), history[-1].train_loss


def fedavg(updates: Sequence[Update]) -> ParamSet:
    """
    Sample-weighted mean of client weights.

    Every tensor is accumulated in float64 in list order and cast back to
    the dtype of the first update.

    Raises:
        EmptyUpdateList: With no updates
        ShapeMismatch: If parameter names or shapes differ between updates
    """
    if not updates:
        raise EmptyUpdateList("fedavg needs at least one update")
    reference, _ = updates[0]
    shapes = reference.shapes()
    for params, n_k in updates[1:]:
        if params.shapes() != shapes:
            raise ShapeMismatch("client updates disagree on parameter names or shapes")
    total = float(sum(n_k for _, n_k in updates))
    if total <= 0:
        raise EmptyUpdateList("client sample counts sum to zero")

    averaged = []
    for template in reference:
        acc = np.zeros(template.shape, dtype=np.float64)
        for params, n_k in updates:
            acc += (n_k / total) * params[template.name].values.astype(np.float64)
        averaged.append(
            ParamTensor.create(template.name, acc.astype(template.values.dtype), template.l2, template.trainable)
        )
    return ParamSet(averaged)


def _val_f1(cfg: ModelConfig, params: ParamSet, val: Optional[GafTensorSet]) -> Optional[float]:
    from fogpipe.core.evaluation import window_metrics

    if val is None or len(val) == 0:
        return None
    network = build_graph(cfg)
    network.parameters().load_values(params.values())
    preds = predict_proba(network, val, cfg.channels, cfg.batch_size).argmax(axis=1)
    return window_metrics(preds, val.labels).f1


def run_rounds(
    round_cfg: RoundConfig,
    cfg: ModelConfig,
    shards: Sequence[ClientShard],
    init: Optional[ParamSet] = None,
    val: Optional[GafTensorSet] = None,
) -> FederatedResult:
    """
    Run the federated schedule.

    Each round broadcasts the global weights, runs ``local_update`` on every
    client (optionally in parallel) and aggregates the results in ascending
    client order.

    Args:
        round_cfg: Number of rounds and local epochs
        cfg: Model configuration shared by all clients
        shards: Client shards
        init: Initial global weights; defaults to a freshly built network
        val: Optional validation images scored after every round

    Returns:
        The global model and one history row per (round, client)
    """
    round_cfg.validate()
    if not shards:
        raise EmptyUpdateList("no client shards")
    val = trainable_subset(val, cfg.channels) if val is not None else None
    global_params = (init if init is not None else build_graph(cfg).parameters()).copy()
    history: List[RoundRecord] = []

    def client_step(shard: ClientShard, round_index: int) -> Tuple[int, ParamSet, int, Optional[float]]:
        stream_index = 0 if round_cfg.shared_stream else None
        params, n_k, loss = local_update(
            global_params, shard, round_cfg.local_epochs, cfg, round_index, stream_index
        )
        return shard.client_id, params, n_k, loss

    for round_index in range(round_cfg.rounds):
        with ThreadPoolExecutor(max_workers=max(1, round_cfg.workers)) as pool:
            results = list(pool.map(lambda s: client_step(s, round_index), shards))
        results.sort(key=lambda item: item[0])
        global_params = fedavg([(params, n_k) for _, params, n_k, _ in results])
        f1 = _val_f1(cfg, global_params, val)
        for client_id, _, n_k, loss in results:
            history.append(RoundRecord(round_index, client_id, n_k, loss, f1))
        logger.info("round %d: %d clients aggregated, global val F1 %s", round_index, len(results), f1)

    network = build_graph(cfg)
    network.parameters().load_values(global_params.values())
    model = TrainedModel(config=cfg, network=network)
    model.metadata.update(
        {
            "channels": list(cfg.channels),
            "epochs_trained": round_cfg.rounds * round_cfg.local_epochs,
            "val_accuracy": None,
            "val_f1": history[-1].global_val_f1 if history else None,
            "test_f1": None,
            "format_version": FORMAT_VERSION,
            "federated": {
                "rounds": round_cfg.rounds,
                "local_epochs": round_cfg.local_epochs,
                "clients": len(shards),
            },
        }
    )
    return FederatedResult(model=model, history=history)


def write_round_history_csv(history: Sequence[RoundRecord], path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        [vars(r) for r in history],
        columns=["round", "client_id", "n_k", "local_loss", "global_val_f1"],
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def shard_summary(shards: Sequence[ClientShard]) -> Dict[int, Dict[str, object]]:
    return {s.client_id: {"subjects": list(s.subjects), "n_k": s.n_k} for s in shards}
