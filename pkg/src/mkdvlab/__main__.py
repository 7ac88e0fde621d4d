"""Module entry point for the mkdvlab package."""

from mkdvlab.cli import main


if __name__ == "__main__":
    main()
