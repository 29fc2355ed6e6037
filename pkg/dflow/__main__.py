from .dflow import DFlow

DFlow.main()
