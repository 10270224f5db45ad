//! Small id newtypes shared across the kernel, tuple space, and simulator.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Virtual simulation time, in ticks.
pub type Tick = u64;

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl From<$inner> for $name {
            fn from(v: $inner) -> Self {
                Self(v)
            }
        }
    };
}

id_newtype!(
    /// Network address of a simulated node. The sink is an ordinary address
    /// distinguished by the topology.
    NodeAddr,
    u16
);

id_newtype!(
    /// Numeric tuple identifier. Tuples are the sole communication channel;
    /// the id is the only addressing information a sender needs.
    TupleId,
    u32
);

id_newtype!(
    /// Identifier of an event within a kernel instance.
    EventId,
    u16
);

id_newtype!(
    /// Identifier of a thread. Unique within a kernel instance so tuple
    /// waiter queues can name their suspended callers.
    ThreadId,
    u16
);
