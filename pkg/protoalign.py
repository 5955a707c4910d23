#!/usr/bin/env python3
"""
Command interface to generate phantoms, train, evaluate and report.
"""
import sys

from protoalign.commands import create_parser, run

parser = create_parser()
namespace = parser.parse_args(sys.argv[1:])

sys.exit(run(namespace))
