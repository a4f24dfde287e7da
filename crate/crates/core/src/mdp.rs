//! Grid-world MDP: states, actions, deterministic transitions and a
//! piecewise-constant (possibly relocating) reward field.
//!
//! Cells are addressed as `(x, y)` with `x` the column and `y` the row; `y`
//! grows downward and state indices are row-major from the top-left cell, so
//! on a 4×4 grid `(1, 3)` is state 13.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("grid dimensions must be positive, got {width}x{height}")]
    EmptyGrid { width: u32, height: u32 },
    #[error("state {index} out of range for grid with {num_states} states")]
    StateOutOfRange { index: usize, num_states: usize },
    #[error("reward field has {got} values, grid needs {expected}")]
    FieldSize { expected: usize, got: usize },
    #[error("reward for state {index} must be finite and nonnegative, got {value}")]
    BadReward { index: usize, value: f64 },
    #[error("fire schedule must be nonempty and start at step 0")]
    ScheduleStart,
    #[error("fire schedule segments must have strictly increasing start steps ({prev} then {next})")]
    ScheduleOrder { prev: u64, next: u64 },
    #[error("fire schedule segments disagree on grid size")]
    ScheduleGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    width: u32,
    height: u32,
}

impl GridSpec {
    pub fn new(width: u32, height: u32) -> Result<Self, MdpError> {
        if width == 0 || height == 0 {
            return Err(MdpError::EmptyGrid { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_states(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, cell: CellState) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    /// Row-major index of `cell`. The cell must lie on the grid.
    pub fn state_index(&self, cell: CellState) -> usize {
        debug_assert!(self.contains(cell), "{cell} outside {self}");
        cell.y as usize * self.width as usize + cell.x as usize
    }

    pub fn cell(&self, index: usize) -> Result<CellState, MdpError> {
        if index >= self.num_states() {
            return Err(MdpError::StateOutOfRange {
                index,
                num_states: self.num_states(),
            });
        }
        let w = self.width as usize;
        Ok(CellState::new((index % w) as u32, (index / w) as u32))
    }

    pub fn check_index(&self, index: usize) -> Result<usize, MdpError> {
        self.cell(index).map(|_| index)
    }

    /// Deterministic transition. Moving into a wall leaves the agent in place.
    pub fn step(&self, cell: CellState, action: Action) -> CellState {
        let CellState { x, y } = cell;
        match action {
            Action::Left => CellState::new(x.saturating_sub(1), y),
            Action::Right if x + 1 < self.width => CellState::new(x + 1, y),
            Action::Up => CellState::new(x, y.saturating_sub(1)),
            Action::Down if y + 1 < self.height => CellState::new(x, y + 1),
            Action::Right | Action::Down => cell,
        }
    }

    /// Transition on state indices.
    pub fn step_index(&self, index: usize, action: Action) -> usize {
        let cell = self.cell(index).expect("state index on grid");
        self.state_index(self.step(cell, action))
    }

    /// Manhattan distance between two states.
    pub fn distance(&self, a: usize, b: usize) -> u32 {
        let (ca, cb) = (self.cell(a).unwrap(), self.cell(b).unwrap());
        ca.x.abs_diff(cb.x) + ca.y.abs_diff(cb.y)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellState {
    pub x: u32,
    pub y: u32,
}

impl CellState {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for CellState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    /// Fixed action order used for table columns, sampling and tie-breaking.
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn opposite(self) -> Self {
        match self {
            Action::Left => Action::Right,
            Action::Right => Action::Left,
            Action::Up => Action::Down,
            Action::Down => Action::Up,
        }
    }

    /// Uppercase name used on the wire and in CSV output.
    pub fn name(self) -> &'static str {
        match self {
            Action::Left => "LEFT",
            Action::Right => "RIGHT",
            Action::Up => "UP",
            Action::Down => "DOWN",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-cell nonnegative reward. A fire state is any cell with reward > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl RewardField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self, MdpError> {
        if values.len() != grid.num_states() {
            return Err(MdpError::FieldSize {
                expected: grid.num_states(),
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(MdpError::BadReward { index, value });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.num_states()],
        }
    }

    /// Field with `reward` on each listed state and zero elsewhere.
    pub fn with_fire_states(grid: GridSpec, states: &[usize], reward: f64) -> Result<Self, MdpError> {
        let mut values = vec![0.0; grid.num_states()];
        for &s in states {
            grid.check_index(s)?;
            values[s] = reward;
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn at(&self, cell: CellState) -> f64 {
        self.values[self.grid.state_index(cell)]
    }

    pub fn is_fire(&self, index: usize) -> bool {
        self.values[index] > 0.0
    }

    pub fn fire_states(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.is_fire(i)).collect()
    }

    pub fn max_reward(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Time-varying reward: the field of the last segment whose start step is
/// `<= t` is active at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FireSchedule {
    segments: Vec<(u64, RewardField)>,
}

impl FireSchedule {
    pub fn new(segments: Vec<(u64, RewardField)>) -> Result<Self, MdpError> {
        match segments.first() {
            Some((0, _)) => {}
            _ => return Err(MdpError::ScheduleStart),
        }
        let grid = segments[0].1.grid();
        for pair in segments.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(MdpError::ScheduleOrder {
                    prev: pair[0].0,
                    next: pair[1].0,
                });
            }
        }
        if segments.iter().any(|(_, f)| f.grid() != grid) {
            return Err(MdpError::ScheduleGrid);
        }
        Ok(Self { segments })
    }

    pub fn stationary(field: RewardField) -> Self {
        Self {
            segments: vec![(0, field)],
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.segments[0].1.grid()
    }

    pub fn segments(&self) -> &[(u64, RewardField)] {
        &self.segments
    }

    pub fn segment_starts(&self) -> impl Iterator<Item = u64> + '_ {
        self.segments.iter().map(|(start, _)| *start)
    }

    pub fn is_stationary(&self) -> bool {
        self.segments.len() == 1
    }

    pub fn active(&self, t: u64) -> &RewardField {
        let pos = self.segments.partition_point(|(start, _)| *start <= t);
        &self.segments[pos - 1].1
    }

    pub fn reward_at(&self, t: u64, cell: CellState) -> f64 {
        self.active(t).at(cell)
    }

    pub fn reward_at_index(&self, t: u64, index: usize) -> f64 {
        self.active(t).value(index)
    }
}
