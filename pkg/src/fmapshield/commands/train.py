"""`fmapshield train`: build and train the desk-scale network."""

import argparse
from pathlib import Path

from fmapshield.codecs.dataset_codec import load_dataset
from fmapshield.codecs.json_codec import save_json
from fmapshield.codecs.model_codec import save_model
from fmapshield.commands.common import (
    MANIFEST_SUFFIX,
    RunRecorder,
    add_dataset_arguments,
    emit,
    load_input_dataset,
    out_dir,
)
from fmapshield.services.quantizer import evaluate_accuracy
from fmapshield.services.trainer import build_desknet, train_sgd


def register(subparsers, common: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser(
        "train",
        parents=[common],
        help="train the desk-scale CNN",
        description="Train the 3-conv desk-scale network with minibatch SGD.",
    )
    add_dataset_arguments(parser, required=False)
    parser.set_defaults(dataset="synthetic:3000")
    parser.add_argument("--eval-dataset", default="synthetic:1000:1", help="held-out images")
    parser.add_argument("--eval-labels", type=Path)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--learning-rate", type=float, default=0.05)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--model-out", type=Path, help="manifest path (default: OUT/model.json)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    recorder = RunRecorder("train", args)
    target = args.model_out or out_dir(args) / "model.json"
    with recorder.stage("load"):
        train_set = load_input_dataset(args, recorder)
        eval_set = load_dataset(args.eval_dataset, args.eval_labels)
        recorder.add_dataset(eval_set)
    with recorder.stage("train"):
        net = train_sgd(
            build_desknet(recorder.derive("init")),
            train_set,
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            seed=recorder.derive("train"),
            batch_size=args.batch_size,
        )
    with recorder.stage("evaluate"):
        accuracy = evaluate_accuracy(net, eval_set)
    save_model(net, target)
    recorder.add_output(target)
    accuracy_path = recorder.add_output(target.with_name(f"{target.stem}.accuracy.json"))
    save_json(accuracy_path, accuracy)
    recorder.save(target.with_name(f"{target.stem}{MANIFEST_SUFFIX}"))
    emit({"model": target, "accuracy": accuracy.model_dump()})
    return 0
