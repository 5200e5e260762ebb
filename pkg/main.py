#!/usr/bin/env python3
"""
FPMC - 统一入口

使用方法:
    python main.py toy --n 200 --out toy.fpmc
    python main.py build --method pspc-square --data toy.fpmc --out runs/pspc
    python main.py sample --model runs/pspc --n 16 --seed 0
    python main.py --help
"""
import sys

from fpmc.cli import main


if __name__ == '__main__':
    sys.exit(main())
