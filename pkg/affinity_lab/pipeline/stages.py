"""
The CLI stages. Each stage reads what earlier stages wrote under `<out>/` and writes its own
artifacts next to them, so a full experiment is gen-data -> train-flow -> train-predictors ->
coteach -> run (or ablate / sweep) -> evaluate.
"""

from pathlib import Path

import pandas as pd
from loguru import logger

from affinity_lab.base.stage import BaseStage
from affinity_lab.coteach import (
    build_pairs,
    coteach_round,
    finetune_unfiltered,
    save_pairs,
    spearman_eval,
)
from affinity_lab.data.dataset import generate_dataset, sample_complex_corpus, write_csv
from affinity_lab.models.flow import FlowModel, train_flow
from affinity_lab.models.inverse_folding import InverseFoldModel, if_accuracy, train_if
from affinity_lab.models.predictors import (
    SeqPredictor,
    SeqScorer,
    StructPredictor,
    StructScorer,
    supervised_train,
)
from affinity_lab.pipeline.design import (
    affinity_flow_run,
    load_artifacts,
    load_designs,
    save_designs,
    save_proposals,
)
from affinity_lab.pipeline.experiments import SWEEP_PARAMETERS, run_ablations, run_sweep
from affinity_lab.pipeline.metrics import compute_metrics, metrics_frame
from affinity_lab.utils.exceptions import CheckpointError
from affinity_lab.utils.misc import log_event
from affinity_lab.utils.state_loader import load_checkpoint
from affinity_lab.world.tables import load_tables


class GenDataStage(BaseStage):
    stage_name = "gen-data"

    def run(self):
        cfg = self.config
        dataset = generate_dataset(
            cfg.world.num_antibodies,
            cfg.world.num_antigens,
            cfg.noise,
            self.generator("dataset"),
            world=cfg.world,
            num_labels=cfg.predictors.num_labels,
        )
        dataset.save(cfg.data_dir)
        outliers = sum(r.is_outlier for r in dataset.records)
        log_event(
            "dataset generated",
            records=len(dataset.records),
            labels=len(dataset.labels),
            outliers=outliers,
            heldout=dataset.heldout_antigens,
        )
        return dataset


class TrainFlowStage(BaseStage):
    """Trains the structure generator and the inverse-folding classifier on one complex corpus each."""

    stage_name = "train-flow"

    def run(self):
        cfg = self.config
        dataset = self.dataset

        corpus = sample_complex_corpus(
            dataset, cfg.flow.num_structures, dataset.world.fluctuation_scale, self.generator("flow_corpus")
        )
        flow = FlowModel(cfg.flow.hidden_dim, cfg.flow.embed_dim, cfg.flow.time_embed_dim)
        flow, flow_curve = train_flow(
            flow,
            [(s.sequence, s.coords) for s in corpus],
            cfg.flow.train,
            self.generator("flow_train"),
            stiffness=cfg.flow.stiffness,
            wandb_run=self.wandb,
        )
        self.save_curve(flow_curve)
        self.save_model(flow, "flow", extra={"stiffness": cfg.flow.stiffness})

        if_cfg = cfg.inverse_folding
        corpus = sample_complex_corpus(
            dataset, if_cfg.corpus_size, dataset.world.fluctuation_scale, self.generator("if_corpus")
        )
        num_heldout = int(len(corpus) * if_cfg.heldout_fraction)
        train, heldout = corpus[: len(corpus) - num_heldout], corpus[len(corpus) - num_heldout :]
        model = InverseFoldModel(if_cfg.hidden_dim, if_cfg.embed_dim, if_cfg.num_neighbors)
        model, curve = train_if(model, train, if_cfg.train, self.generator("if_train"), heldout, self.wandb)
        self.save_curve(curve)
        accuracy = if_accuracy(model, heldout) if heldout else float("nan")
        self.save_model(model, "inverse_fold", extra={"heldout_accuracy": accuracy})
        log_event("generators trained", flow_loss=flow_curve.final if len(flow_curve) else None, if_accuracy=accuracy)
        return flow, model


class TrainPredictorsStage(BaseStage):
    stage_name = "train-predictors"

    def run(self):
        cfg = self.config
        dataset = self.dataset
        p_cfg = cfg.predictors
        cdr = dataset.world.cdr_positions

        seq = SeqScorer(SeqPredictor(cdr, p_cfg.hidden_dim, p_cfg.embed_dim), dataset)
        struct = StructScorer(
            StructPredictor(len(cdr), p_cfg.hidden_dim, p_cfg.embed_dim, p_cfg.num_neighbors), dataset
        )
        struct.prefetch([(l.antigen_id, l.antibody_id) for l in dataset.labels])
        for scorer in (seq, struct):
            _, curve = supervised_train(
                scorer,
                dataset.labels,
                p_cfg.train,
                self.generator(scorer.name),
                validation_fraction=p_cfg.validation_fraction,
                wandb_run=self.wandb,
            )
            self.save_curve(curve)
            self.save_model(scorer.model, f"{scorer.name}_supervised")
        return seq, struct


class CoteachStage(BaseStage):
    """
    Builds noisy pairwise labels on the training antigens, fine-tunes each predictor without
    selection (the reference ladder rung) and with cross-model consensus selection.
    """

    stage_name = "coteach"

    def load_scorers(self):
        directory = Path(self.config.checkpoint_dir)
        seq, _ = load_checkpoint(SeqPredictor, directory / "seq_supervised.aflb")
        struct, _ = load_checkpoint(StructPredictor, directory / "struct_supervised.aflb")
        return SeqScorer(seq, self.dataset), StructScorer(struct, self.dataset)

    def run(self):
        cfg = self.config
        c_cfg = cfg.coteach
        dataset = self.dataset
        training = set(dataset.training_antigens)
        heldout = dataset.heldout_antigens

        pairs = build_pairs(
            [r for r in dataset.records if r.antigen_id in training],
            c_cfg.pairs_per_antigen,
            c_cfg.tie_epsilon,
            self.generator("pairs"),
        )
        save_pairs(pairs, self.out_dir / "pairs.csv")
        logger.info(f"Built {len(pairs)} pairwise labels over {len(training)} antigens")

        seq, struct = self.load_scorers()
        unfiltered = {
            s.name: finetune_unfiltered(
                s, pairs, c_cfg.finetune, self.generator("unfiltered", s.name), c_cfg.rounds, self.wandb
            )
            for s in (seq, struct)
        }

        def evaluate(scorer):
            return spearman_eval(scorer, heldout, dataset).mean

        result = coteach_round(
            seq,
            struct,
            pairs,
            c_cfg.rounds,
            c_cfg.finetune,
            self.generator("coteach"),
            order=c_cfg.order,
            evaluate=evaluate,
            wandb_run=self.wandb,
        )

        for name, scorer in (("seq", result.seq), ("struct", result.struct)):
            self.save_model(unfiltered[name].model, f"{name}_unfiltered")
            self.save_model(scorer.model, f"{name}_coteach")

        write_csv(pd.DataFrame([r.__dict__ for r in result.reports]), self.out_dir / "coteach_report.csv")
        ladder = [
            {
                "predictor": name,
                "supervised": evaluate(base),
                "unfiltered": evaluate(unfiltered[name]),
                "filtered": evaluate(tuned),
            }
            for name, base, tuned in (("seq", seq, result.seq), ("struct", struct, result.struct))
        ]
        write_csv(pd.DataFrame(ladder), self.out_dir / "spearman_ladder.csv")
        for row in ladder:
            log_event("spearman ladder", **row)
        return result, ladder


class RunStage(BaseStage):
    stage_name = "run"

    def run(self):
        artifacts = load_artifacts(self.config)
        proposals = []
        designs = affinity_flow_run(self.config, artifacts, proposals=proposals)
        save_designs(designs, self.out_dir / "designs.csv")
        save_proposals(proposals, self.out_dir / "proposals.csv")
        report = compute_metrics(designs, artifacts.dataset.world.cdr_positions, artifacts.dataset.tables)
        write_csv(metrics_frame(report), self.out_dir / "metrics.csv")
        log_event("designs evaluated", imp=report.imp, sim=report.sim, nat=report.nat, designs=len(designs))
        return designs, report


class AblateStage(BaseStage):
    stage_name = "ablate"

    def run(self):
        return run_ablations(self.config, load_artifacts(self.config), out_dir=self.out_dir)


class SweepStage(BaseStage):
    stage_name = "sweep"

    def __init__(self, config, parameter: str = "all"):
        super().__init__(config)
        if parameter not in (*SWEEP_PARAMETERS, "all"):
            raise ValueError(f"unknown sweep parameter {parameter!r}")
        self.parameter = parameter

    def run(self):
        artifacts = load_artifacts(self.config)
        parameters = SWEEP_PARAMETERS if self.parameter == "all" else (self.parameter,)
        return {p: run_sweep(p, self.config, artifacts, out_dir=self.out_dir) for p in parameters}


class EvaluateStage(BaseStage):
    """Recomputes metrics.csv from an existing designs.csv with the exact oracle tables."""

    stage_name = "evaluate"

    def run(self):
        path = self.out_dir / "designs.csv"
        if not path.exists():
            raise CheckpointError(path, "no designs to evaluate, run the run stage first")
        designs = load_designs(path)
        data_tables = Path(self.config.data_dir) / "tables"
        tables = load_tables(data_tables) if data_tables.exists() else load_tables()
        report = compute_metrics(designs, self.config.world.cdr_positions, tables)
        write_csv(metrics_frame(report), self.out_dir / "metrics.csv")
        log_event("designs evaluated", imp=report.imp, sim=report.sim, nat=report.nat, designs=len(designs))
        return report


STAGES = {
    stage.stage_name: stage
    for stage in (
        GenDataStage,
        TrainFlowStage,
        TrainPredictorsStage,
        CoteachStage,
        RunStage,
        AblateStage,
        SweepStage,
        EvaluateStage,
    )
}
