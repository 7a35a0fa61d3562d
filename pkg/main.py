"""FedLGA Sim - command-line entry point."""

from fedlga_sim.cli import main

if __name__ == "__main__":
    main()
