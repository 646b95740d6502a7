use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Up,
    Down,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transfer {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub bytes: usize,
}

/// Carries encoded messages between the server and one client. All
/// protocol communication goes through this interface as byte buffers.
pub trait Transport {
    fn deliver(
        &mut self,
        round: usize,
        client: usize,
        direction: Direction,
        payload: Vec<u8>,
    ) -> Result<Vec<u8>, String>;
}

/// In-process transport that hands payloads through and records their sizes.
#[derive(Debug, Clone, Default)]
pub struct SimulatedTransport {
    transfers: Vec<Transfer>,
}

impl SimulatedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transfers(&self) -> &[Transfer] {
        &self.transfers
    }

    pub fn total_bytes(&self, direction: Direction) -> usize {
        self.transfers
            .iter()
            .filter(|t| t.direction == direction)
            .map(|t| t.bytes)
            .sum()
    }
}

impl Transport for SimulatedTransport {
    fn deliver(
        &mut self,
        round: usize,
        client: usize,
        direction: Direction,
        payload: Vec<u8>,
    ) -> Result<Vec<u8>, String> {
        self.transfers.push(Transfer {
            round,
            client,
            direction,
            bytes: payload.len(),
        });
        Ok(payload)
    }
}
