import torch.nn as nn
import torch.nn.functional as F

_CONV = {2: nn.Conv2d, 3: nn.Conv3d}


class ResBlock(nn.Module):
    """Two conv -> GroupNorm -> ReLU layers with an additive shortcut.

    The shortcut is the identity when channel counts match and a 1x1(x1)
    projection otherwise. No activation follows the addition.
    """

    def __init__(self, in_channels, out_channels, groups=8, ndim=3):
        super().__init__()
        if out_channels % groups:
            raise ValueError(
                f"{out_channels} channels are not divisible into {groups} groups"
            )
        conv = _CONV[ndim]
        self.conv1 = conv(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm1 = nn.GroupNorm(groups, out_channels)
        self.conv2 = conv(out_channels, out_channels, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.shortcut = (
            nn.Identity()
            if in_channels == out_channels
            else conv(in_channels, out_channels, kernel_size=1)
        )

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = F.relu(self.norm2(self.conv2(y)))
        return y + self.shortcut(x)
