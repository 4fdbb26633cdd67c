"""Bundled benchmark netlists."""

from importlib import resources


def deck_names():
    return sorted(
        p.name[:-4]
        for p in resources.files(__name__).iterdir()
        if p.name.endswith(".cir")
    )


def load_deck(name: str) -> str:
    return (resources.files(__name__) / f"{name}.cir").read_text()
