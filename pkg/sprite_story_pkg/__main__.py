#!/usr/bin/env python3
"""Launcher: ``python -m sprite_story_pkg <command>``."""

from .cli import main

if __name__ == "__main__":
    raise SystemExit(main())
