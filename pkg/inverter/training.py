"""
Three-stage training of the layered inverter.
Stage 1 trains the layer generators independently, stage 2 trains the panorama
generator on frozen layers, stage 3 fine-tunes everything end to end.
"""
import hashlib
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from config.config import AblationFlags, ExperimentConfig, LossWeights, StageConfig
from inverter.data import FaceDataset
from inverter.domain import COMPONENTS
from inverter.errors import AblationError, CapabilityError, DataError, StageOrderError
from inverter.evaluation import evaluate_model
from inverter.extractor import TemplateExtractor
from inverter.generators import ChannelSchedule, LayeredInverter, save_checkpoint, set_trainable
from inverter.logger import RunLogger
from inverter.losses import AttributeClassifier, FeatureNetwork, LossParts, stage_objective

# Rows of the ablation table: (f_s1, m_s1, s2, ft_s2, s3)
ABLATION_ROWS: Dict[int, AblationFlags] = {
    1: AblationFlags(f_s1=False, m_s1=False, s2=True, ft_s2=True, s3=False),
    2: AblationFlags(f_s1=True, m_s1=False, s2=True, ft_s2=True, s3=True),
    3: AblationFlags(f_s1=True, m_s1=True, s2=False, ft_s2=False, s3=False),
    4: AblationFlags(f_s1=True, m_s1=True, s2=True, ft_s2=False, s3=True),
    5: AblationFlags(f_s1=True, m_s1=True, s2=True, ft_s2=True, s3=False),
    6: AblationFlags(),
}


def ablation_row(flags: AblationFlags) -> int:
    """Row number of a supported flag combination."""
    for row, row_flags in ABLATION_ROWS.items():
        if row_flags.as_tuple() == flags.as_tuple():
            return row
    raise AblationError(f"unsupported ablation flags (f_s1, m_s1, s2, ft_s2, s3) = {flags.as_tuple()}")


def seed_everything(seed: int, deterministic: bool = False) -> torch.Generator:
    """
    Seed python, numpy and torch.

    Args:
        seed: Run seed
        deterministic: Also force deterministic kernels and a single thread

    Returns:
        torch.Generator seeded with the same value
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
        torch.set_num_threads(1)
    return torch.Generator().manual_seed(seed)


def module_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    digest = hashlib.sha256()
    for key, value in module.state_dict().items():
        digest.update(key.encode("utf-8"))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class TrainState:
    """Everything one training run mutates."""
    model: LayeredInverter
    seed: int
    stage: int = 0
    epoch: int = 0
    optimizers: Dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)
    cancelled: List[int] = field(default_factory=list)

    def checksums(self) -> Dict[str, str]:
        return {name: module_checksum(gen) for name, gen in self.model.generators().items()}

    def stage_history(self, stage: int) -> List[dict]:
        return [h for h in self.history if h["stage"] == stage]


class _EpochMeter:
    """Running per-generator, per-term loss means over one epoch."""

    def __init__(self):
        self.sums: Dict[str, Dict[str, float]] = {}
        self.batches = 0

    def add(self, name: str, total: torch.Tensor, terms: Dict[str, torch.Tensor]):
        entry = self.sums.setdefault(name, {})
        entry["total"] = entry.get("total", 0.0) + float(total)
        for term, value in terms.items():
            entry[term] = entry.get(term, 0.0) + float(value)

    def means(self) -> Dict[str, Dict[str, float]]:
        n = max(self.batches, 1)
        return {name: {term: value / n for term, value in entry.items()} for name, entry in self.sums.items()}


class StagedTrainer:
    """Runs the three training stages with freezing, ablation switches and checkpoints."""

    def __init__(self, config: ExperimentConfig, extractor: TemplateExtractor, fnet: FeatureNetwork,
                 attribute_classifier: AttributeClassifier, logger: Optional[RunLogger] = None,
                 run_dir: Optional[Path] = None, device: str = "cpu", model: Optional[LayeredInverter] = None,
                 completed_stage: int = 0):
        """
        Initialize trainer.

        Args:
            config: Experiment configuration
            extractor: Target extractor (differentiable when any template term is weighted)
            fnet: Feature network for perceptual terms
            attribute_classifier: Attribute classifier for the panorama objective
            logger: Run logger, defaults to an in-memory sink
            run_dir: Directory receiving checkpoints; None disables checkpointing
            device: Torch device string
            model: Existing inverter to resume from
            completed_stage: Last stage the resumed model completed
        """
        self.config = config
        self.row = ablation_row(config.ablation)
        self.extractor = extractor
        self.fnet = fnet
        self.attribute_classifier = attribute_classifier
        self.logger = logger or RunLogger(None)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.device = torch.device(device)
        self._check_capabilities()

        seed_everything(config.seed, config.deterministic)
        if model is None:
            schedule = ChannelSchedule.for_resolution(config.resolution, config.width_divisor)
            model = LayeredInverter(config.template_dim, config.resolution, schedule, config.ablation)
        elif model.flags.as_tuple() != config.ablation.as_tuple():
            raise AblationError("resumed checkpoint was trained with different ablation flags")
        self.state = TrainState(model=model.to(self.device), seed=config.seed, stage=completed_stage)

    def _check_capabilities(self):
        weights = [self.config.stage2.loss_weights, self.config.stage3.loss_weights]
        if self.config.stage1_template_mode != "off":
            weights.append(self.config.stage1.loss_weights)
        if any(w.w_tmp > 0 for w in weights) and not self.extractor.descriptor.differentiable:
            raise CapabilityError(
                f"template loss needs a differentiable extractor, {self.extractor.descriptor.name!r} is query-only"
            )

    def _loader(self, dataset: FaceDataset, stage_config: StageConfig) -> DataLoader:
        if len(dataset) < 2:
            raise DataError("training needs at least two samples")
        generator = torch.Generator().manual_seed(self.config.seed * 10 + stage_config.stage)
        return DataLoader(
            dataset,
            batch_size=stage_config.batch_size,
            shuffle=True,
            generator=generator,
            drop_last=len(dataset) > stage_config.batch_size,
            num_workers=0 if self.config.deterministic else self.config.num_workers,
        )

    def _templates(self, t: torch.Tensor) -> torch.Tensor:
        return F.normalize(t, dim=1) if self.config.normalize_templates else t

    def _layer_weights(self, stage_config: StageConfig) -> LossWeights:
        weights = stage_config.loss_weights
        if self.config.stage1_template_mode == "off" and weights.w_tmp > 0:
            weights = LossWeights(0.0, weights.w_pix, weights.w_per, weights.w_att)
        return weights

    def layer_objective(self, stage: int, component_index: int, generated: torch.Tensor,
                        batch: dict, weights: LossWeights):
        """
        Objective of one layer generator.

        The generated layer is pasted into a zero canvas through its mask before
        template extraction; pixel and perceptual terms use the masked target layer.
        """
        target = batch["layers"][:, component_index]
        parts = LossParts(x=target, x_hat=generated)
        if weights.w_tmp > 0:
            mask = batch["masks"][:, component_index].unsqueeze(1)
            pasted = torch.where(mask, generated, torch.zeros_like(generated))
            t_hat = self.extractor.extract_differentiable(pasted)
            if self.config.stage1_template_mode == "layer_template":
                t = self.extractor.extract_batch(target)
            else:
                t = batch["template"]
            parts.t, parts.t_hat = self._templates(t), self._templates(t_hat)
        return stage_objective(stage, "layer", parts, weights, self.fnet)

    def panorama_objective(self, stage: int, panorama: torch.Tensor, batch: dict, weights: LossWeights):
        """Objective of the panorama generator against the full image."""
        image = batch["image"]
        parts = LossParts(x=image, x_hat=panorama)
        if weights.w_tmp > 0:
            parts.t = self._templates(batch["template"])
            parts.t_hat = self._templates(self.extractor.extract_differentiable(panorama))
        if weights.w_att > 0:
            with torch.no_grad():
                parts.ax = self.attribute_classifier(image)
            parts.ax_hat = self.attribute_classifier(panorama)
        return stage_objective(stage, "panorama", parts, weights, self.fnet)

    def _to_device(self, batch: dict) -> dict:
        return {key: value.to(self.device) for key, value in batch.items()}

    def _set_trainable(self, names: List[str]):
        for name, gen in self.state.model.generators().items():
            set_trainable(gen, name in names)
        self.state.model.train()

    def _begin(self, stage: int, names: List[str]) -> StageConfig:
        if self.state.stage != stage - 1:
            raise StageOrderError(f"stage {stage} requires stage {stage - 1} to be complete, last completed is {self.state.stage}")
        stage_config = self.config.stage_config(stage)
        gens = self.state.model.generators()
        self.state.optimizers = {
            name: torch.optim.Adam(gens[name].parameters(), lr=stage_config.learning_rate) for name in names
        }
        self.state.epoch = 0
        self._set_trainable(names)
        self.logger.log_stage_start(stage, stage_config.epochs, stage_config.learning_rate, names)
        return stage_config

    def _cancel(self, stage: int, reason: str) -> TrainState:
        if self.state.stage != stage - 1:
            raise StageOrderError(f"stage {stage} requires stage {stage - 1} to be complete, last completed is {self.state.stage}")
        self.state.stage = stage
        self.state.cancelled.append(stage)
        self.logger.log_cancel_stage(stage, reason)
        return self.state

    def _end_epoch(self, stage: int, meter: _EpochMeter, epochs: int):
        self.state.epoch += 1
        losses = meter.means()
        self.state.history.append({"stage": stage, "epoch": self.state.epoch, "losses": losses})
        self.logger.log_epoch(stage, self.state.epoch, losses)
        every = self.config.checkpoint_every
        if self.run_dir is not None and every > 0 and self.state.epoch % every == 0 and self.state.epoch < epochs:
            path = self.run_dir / "checkpoints" / f"stage{stage}_epoch{self.state.epoch:03d}.pt"
            save_checkpoint(self.state.model, path, stage, self.state.seed, {"epoch": self.state.epoch})
            self.logger.log_checkpoint(path, stage, self.state.epoch)

    def _finish(self, stage: int) -> TrainState:
        self.state.stage = stage
        self.state.model.eval()
        self.logger.log_stage_end(stage, self.state.epoch)
        if self.run_dir is not None:
            path = self.run_dir / "checkpoints" / f"stage{stage}.pt"
            save_checkpoint(self.state.model, path, stage, self.state.seed, {"ablation_row": self.row})
            self.logger.log_checkpoint(path, stage)
        return self.state

    def _step(self, names: List[str], loss: torch.Tensor):
        for name in names:
            self.state.optimizers[name].zero_grad(set_to_none=True)
        loss.backward()
        for name in names:
            self.state.optimizers[name].step()

    def run_stage1(self, dataset: FaceDataset) -> TrainState:
        """
        Train every layer generator independently on its masked layer target.

        Args:
            dataset: Training dataset

        Returns:
            Updated TrainState
        """
        model = self.state.model
        names = list(model.layer_generators.keys())
        if not names:
            return self._cancel(1, "no layer generators in this ablation row")
        stage_config = self._begin(1, names)
        weights = self._layer_weights(stage_config)
        loader = self._loader(dataset, stage_config)
        index = {c.value: i for i, c in enumerate(COMPONENTS)}

        for _ in tqdm(range(stage_config.epochs), desc="stage 1", leave=False):
            meter = _EpochMeter()
            for batch in loader:
                batch = self._to_device(batch)
                for name in names:
                    generated = model.layer_generators[name](batch["template"])
                    total, terms = self.layer_objective(1, index[name], generated, batch, weights)
                    self._step([name], total)
                    meter.add(name, total, terms)
                meter.batches += 1
            self._end_epoch(1, meter, stage_config.epochs)
        return self._finish(1)

    def run_stage2(self, dataset: FaceDataset) -> TrainState:
        """Train the panorama generator on layers from the frozen layer generators."""
        model = self.state.model
        if model.panorama is None:
            return self._cancel(2, "panorama generator disabled")
        stage_config = self._begin(2, ["panorama"])
        loader = self._loader(dataset, stage_config)

        for _ in tqdm(range(stage_config.epochs), desc="stage 2", leave=False):
            meter = _EpochMeter()
            for batch in loader:
                batch = self._to_device(batch)
                t = batch["template"]
                with torch.no_grad():
                    layers = model.generate_layers(t)
                panorama = model.compose(layers, t)
                total, terms = self.panorama_objective(2, panorama, batch, stage_config.loss_weights)
                self._step(["panorama"], total)
                meter.add("panorama", total, terms)
                meter.batches += 1
            self._end_epoch(2, meter, stage_config.epochs)
        return self._finish(2)

    def run_stage3(self, dataset: FaceDataset) -> TrainState:
        """
        Fine-tune all generators end to end.

        Each generator keeps the objective of the stage it was trained in; the
        summed objectives are backpropagated through the whole inverter.
        """
        model = self.state.model
        if not self.config.ablation.s3:
            return self._cancel(3, "joint fine-tuning disabled")
        names = list(model.generators().keys())
        stage_config = self._begin(3, names)
        weights = stage_config.loss_weights
        layer_weights = self._layer_weights(stage_config)
        loader = self._loader(dataset, stage_config)
        index = {c.value: i for i, c in enumerate(COMPONENTS)}

        for _ in tqdm(range(stage_config.epochs), desc="stage 3", leave=False):
            meter = _EpochMeter()
            for batch in loader:
                batch = self._to_device(batch)
                t = batch["template"]
                layers = model.generate_layers(t)
                loss = None
                for name in model.layer_generators.keys():
                    total, terms = self.layer_objective(3, index[name], layers[:, index[name]], batch, layer_weights)
                    meter.add(name, total, terms)
                    loss = total if loss is None else loss + total
                if model.panorama is not None:
                    total, terms = self.panorama_objective(3, model.compose(layers, t), batch, weights)
                    meter.add("panorama", total, terms)
                    loss = total if loss is None else loss + total
                self._step(names, loss)
                meter.batches += 1
            self._end_epoch(3, meter, stage_config.epochs)
        return self._finish(3)

    def run(self, dataset: FaceDataset) -> TrainState:
        """Run every stage after the last completed one."""
        stages = {1: self.run_stage1, 2: self.run_stage2, 3: self.run_stage3}
        for stage in range(self.state.stage + 1, 4):
            stages[stage](dataset)
        return self.state


def run_ablation(config: ExperimentConfig, row: int, train_set: FaceDataset, test_set: FaceDataset,
                 extractor: TemplateExtractor, fnet: FeatureNetwork, attribute_classifier: AttributeClassifier,
                 logger: Optional[RunLogger] = None, run_dir: Optional[Path] = None,
                 device: str = "cpu") -> dict:
    """
    Train and evaluate one ablation row.

    Args:
        config: Base configuration; its ablation flags are replaced by the row's
        row: Row number 1-6
        train_set: Training dataset
        test_set: Test dataset
        extractor: Target extractor
        fnet: Feature network
        attribute_classifier: Attribute classifier
        logger: Optional run logger
        run_dir: Parent directory for the row's checkpoints
        device: Torch device string

    Returns:
        Metrics row: flags, TAR per protocol and FAR, FAPD, FAPC
    """
    if row not in ABLATION_ROWS:
        raise AblationError(f"ablation row must be 1-6, got {row}")
    logger = logger or RunLogger(None)
    flags = ABLATION_ROWS[row]
    row_config = replace(config, ablation=flags)
    trainer = StagedTrainer(row_config, extractor, fnet, attribute_classifier, logger,
                            run_dir / f"row{row}" if run_dir is not None else None, device)
    state = trainer.run(train_set)
    report = evaluate_model(state.model, test_set, extractor, fnet, config.far_levels,
                            impostor_ratio=config.impostor_ratio, seed=config.seed, logger=logger)[0]

    metrics = {"row": row, **asdict(flags)}
    for protocol, tars in report.tar_at.items():
        for far, tar in tars.items():
            metrics[f"{protocol}_tar@{far}"] = tar
    metrics["fapd"] = report.fapd
    metrics["fapc"] = report.fapc
    logger.log_event("ablation_row", metrics)
    return metrics
