#!/usr/bin/python3
# -*- coding: utf-8 -*-
import json
import os
import sys
import time

"""
Shared helpers for the ULC command line and training loop
Python 3 required!
"""


class Tools(object):
    """
    Small helpers for environment access, logging and timing

    Args:

        object (obj): Object class
    """

    @staticmethod
    def log(*message) -> None:
        """
        Log message to stderr
        """
        sys.stderr.write(f'{" ".join(str(m) for m in message)}\n')

    @staticmethod
    def debug(*message) -> None:
        """
        Log message to stderr only when ULC_DEBUG is set
        """
        if Tools.getEnvBool("ULC_DEBUG"):
            Tools.log("DEBUG:", *message)

    @staticmethod
    def getEnvBool(var: str, default: bool = False) -> bool:
        """
        Reads boolean env variable provided as text.
        0 will be treated as False
        >1 will be treated as True

        Args:

            var (str): Name of the env variable
            default (bool, optional): Default if not found. Defaults to False.

        Returns:

            bool: True or False as bool
        """
        value = os.getenv(var)
        if value is None:
            return default
        if value.isdigit():
            return value != "0"
        return value.lower() == "true"

    @staticmethod
    def getEnvInt(var: str, default=None):
        """
        Reads integer env variable

        Args:

            var (str): Name of the env variable
            default (int, optional): Fallback if not set or empty

        Raises:

            ValueError: if the variable is set but not an integer

        Returns:

            int: parsed value or default
        """
        value = os.getenv(var)
        if value is None or value.strip() == "":
            return default
        try:
            return int(value.strip())
        except ValueError:
            raise ValueError(f'Environment variable "{var}" must be an integer, got "{value}"')

    @staticmethod
    def seedFromEnv(seed: int) -> int:
        """
        ULC_SEED overrides any configured seed

        Args:

            seed (int): configured seed

        Returns:

            int: effective seed
        """
        override = Tools.getEnvInt("ULC_SEED")
        if override is not None and override != seed:
            Tools.log(f"ULC_SEED={override} overrides configured seed {seed}")
            return override
        return seed

    @staticmethod
    def clock() -> float:
        """
        Monotonic clock in seconds, for wall-clock reporting
        """
        return time.perf_counter()


class ErrJson(object):
    """
    Machine readable error object written to stdout on failure
    """

    def __init__(self) -> None:
        self.error: dict = dict()

    def add_error(self, err: Exception) -> None:
        """
        Add exception details

        Args:

            err (Exception): the failure to describe
        """
        self.error.update({"type": type(err).__name__, "message": str(err)})
        extra = getattr(err, "details", None)
        if callable(extra):
            self.error.update(extra())

    def write_json(self) -> None:
        """
        Write error JSON object to std out
        """
        sys.stdout.write(json.dumps({"error": self.error}, sort_keys=True, default=str))
        sys.stdout.write("\n")
