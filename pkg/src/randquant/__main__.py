from randquant.cli import main

main()
