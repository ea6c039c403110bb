from mmc_lab.cli import main

main()
