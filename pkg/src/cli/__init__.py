from .commands import BalanceApp, COMMANDS

__all__ = ['BalanceApp', 'COMMANDS']
