"""Allow `python -m hybridforge <command> ...`."""

from .cli import entry

if __name__ == "__main__":
    entry()
