"""Recover a rank-limited teacher convolution by fine-tuning a perturbed decomposed student."""
import argparse

from filterbasis import zoo
from filterbasis.model_io import Dataset
from filterbasis.pipeline import decompose_graph, make_plan
from filterbasis.trainer import LossSpec, OptimizerState, data_loss, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rank", type=int, default=3)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--gamma", type=float, default=1e-2)
    ap.add_argument("--epochs", type=int, default=125)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    teacher, x, y = zoo.teacher_student(rank=args.rank, seed=args.seed)
    student = decompose_graph(teacher, make_plan(teacher, args.rank))
    zoo.perturb_trainables(student, args.noise, seed=args.seed + 1)
    print(f"start mse {data_loss(student.forward(x), y, 'mse')[0]:.3e}")
    report = train(student, Dataset(x, y, batch_size=8), LossSpec(gamma=args.gamma),
                   OptimizerState(lr=args.lr, seed=args.seed), epochs=args.epochs)
    for rec in report.epochs[:: max(1, len(report.epochs) // 10)]:
        print(f"epoch {rec.epoch:4d}  data {rec.data_loss:.3e}  penalty {rec.penalty:.3e}")
    print(f"final mse {data_loss(student.forward(x), y, 'mse')[0]:.3e} after {report.steps} steps")


if __name__ == "__main__":
    main()
