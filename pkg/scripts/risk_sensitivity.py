"""Utility of one routed agent under a sure reward versus a coin flip with the same mean.

    python scripts/risk_sensitivity.py
"""
import argparse

from filtered_pg.oracle import bernoulli, point_mass, risk_sensitivity_demo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--temperatures", default="0.25,0.5,1,2,5,10,100,1000")
    ap.add_argument("--epsilon", type=float, default=0.0)
    args = ap.parse_args()

    print(f"{'tau':>8} {'U sure':>10} {'U coin':>10} {'gap':>10}")
    for tau in (float(t) for t in args.temperatures.split(",")):
        ua, ub = risk_sensitivity_demo(lambda r: r * r, point_mass(0.5), bernoulli(0.5),
                                       tau=tau, epsilon=args.epsilon)
        print(f"{tau:>8g} {ua:>10.6f} {ub:>10.6f} {ub - ua:>10.6f}")


if __name__ == "__main__":
    main()
