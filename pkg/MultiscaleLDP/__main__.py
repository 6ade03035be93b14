from .CLI import main

main()
