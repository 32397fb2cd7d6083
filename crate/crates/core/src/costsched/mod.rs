//! Communication volume models and compute/communication overlap scheduling.

mod schedule;
mod volume;

pub use schedule::{
    compare_schedules, example_timeline, simulate_schedule, EventsFile, Mode, ScheduleReport, ScheduledEvent, Stream,
    Timeline, TimelineEvent, EVENTS_SCHEMA, TIMELINE_SCHEMA,
};
pub use volume::{
    activation_memory, compare, dap_forward_volume, dap_volume, tp_volume, CommModel, DapBreakdown, ForwardVolume,
    RowK, VolumeReport, VOLUME_SCHEMA,
};

#[cfg(test)]
mod tests;
